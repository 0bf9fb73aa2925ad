"""Hub and proxies on localhost TCP: a guest joins, streams, and is revoked.

Run with ``python demos/live_hub.py``.
"""

import asyncio
from pathlib import Path

from collabiot.engine import DeviceRecord, PolicyEngine, PolicyStore
from collabiot.model import parse_policy_document
from collabiot.proxy import DeviceProxy
from collabiot.proxy.adapters import make_adapter
from collabiot.rpc import HubClient, HubServer, ProxyClient, ProxyServer, admin_message, rpc_deliver
from collabiot.tokens import TokenService, generate_keypair


async def main():
    key = generate_keypair()
    tokens = TokenService(key)
    servers, records = [], []
    for dev_id, kind, room in [("lr-lock", "lock", "livingroom"), ("lr-bulb", "bulb", "livingroom"),
                               ("laptop", "laptop", "office")]:
        adapter = make_adapter(kind)
        server = await ProxyServer(DeviceProxy(dev_id, adapter, tokens.public_key)).start()
        servers.append(server)
        records.append(DeviceRecord(dev_id, {"type": kind, "location": room}, adapter.capabilities, server.address))
    doc = parse_policy_document((Path(__file__).parent / "home.yaml").read_text())
    engine = PolicyEngine(PolicyStore.from_document(doc, records))
    hub = await HubServer(engine, tokens, deliver=rpc_deliver()).start()
    print("hub on", hub.address)
    try:
        async with await HubClient.connect(hub.address) as client:
            reply = await client.join("phone-1", attributes={"relation": "friend"})
        entries = {e["device_type"]: e for e in reply["result"]["entries"]}
        print("joined with tokens for", sorted(entries))

        async with await ProxyClient.connect(entries["laptop"]["proxy_address"]) as laptop:
            await laptop.establish(entries["laptop"]["token"])
            print("inference:", (await laptop.request("inference_service", {"input": [1, 2, 3]}))["status"])
            async with await HubClient.connect(hub.address) as admin:
                reply = await admin.call(admin_message("remove_policy", {"name": "policy2"}, key))
            print("removed policy2, invalidated:", reply["result"]["invalidated"])
            after = await laptop.request("inference_service", {"input": [1, 2, 3]})
            print("inference after revocation:", after["status"], after.get("reason"))
    finally:
        await hub.stop()
        for server in servers:
            await server.stop()


asyncio.run(main())
