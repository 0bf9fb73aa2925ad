"""A friend's phone joins the home, uses two devices, then loses laptop access.

Everything runs in one process: policy store, token service and proxies.
Run with ``python demos/home_in_process.py``.
"""

import time
from pathlib import Path

from collabiot.engine import GUEST, DeviceRecord, Mutation, PolicyEngine, PolicyStore
from collabiot.model import parse_policy_document
from collabiot.proxy import DeviceProxy
from collabiot.proxy.adapters import make_adapter
from collabiot.proxy.proxy import RequestEnvelope
from collabiot.tokens import TokenService, generate_keypair
from collabiot.workflow import apply_mutation

doc = parse_policy_document((Path(__file__).parent / "home.yaml").read_text())
tokens = TokenService(generate_keypair())

fleet = {"lr-lock": ("lock", "livingroom"), "lr-bulb": ("bulb", "livingroom"), "laptop": ("laptop", "office")}
proxies, records = {}, []
for i, (dev_id, (kind, room)) in enumerate(fleet.items()):
    adapter = make_adapter(kind)
    address = f"inproc:{dev_id}"
    proxies[address] = DeviceProxy(dev_id, adapter, tokens.public_key)
    records.append(DeviceRecord(dev_id, {"type": kind, "location": room}, adapter.capabilities, address))

engine = PolicyEngine(PolicyStore.from_document(doc, records))
phone = DeviceRecord("phone-1", {"relation": "friend"}, kind=GUEST)
engine.apply(Mutation("add", "device", phone))

now = time.time()
sessions = {}
for entry in tokens.on_device_join(phone, engine.store, now):
    proxy = proxies[entry.proxy_address]
    sessions[entry.claims.aud] = proxy.establish_session(entry.token, now)
    caps = ", ".join(f"{c}={lim.to_text() if lim else 'unlimited'}" for c, lim in entry.claims.inc_cap)
    print(f"token for {entry.claims.aud}: {caps}")

laptop = proxies["inproc:laptop"]
admitted = sum(bool(laptop.authorize_and_admit(sessions["laptop"], RequestEnvelope("inference_service"), now))
               for _ in range(15))
print(f"15 inference requests in the same instant: {admitted} admitted (burst 10)")
print("set_conf on the lock:", proxies["inproc:lr-lock"].authorize_and_admit(
    sessions["lr-lock"], RequestEnvelope("set_conf"), now).reason)


def deliver(address, notice, signature):
    proxies[address].apply_invalidation(notice, time.time(), signature)


summary = apply_mutation(engine, tokens, Mutation("remove", "policy", "policy2"), now + 1, deliver=deliver)
print("removed policy2; invalidated pairs:", summary["invalidated"])
print("next inference request:",
      laptop.authorize_and_admit(sessions["laptop"].jti, RequestEnvelope("inference_service"), now + 2).reason)
print("lock still works:",
      proxies["inproc:lr-lock"].authorize_and_admit(sessions["lr-lock"], RequestEnvelope("unlock"), now + 2).admitted)
