import pytest

from collabiot.engine import GUEST, DeviceRecord, PolicyStore
from collabiot.model import parse_policy_document
from collabiot.proxy.adapters import make_adapter
from collabiot.tokens import TokenService, generate_keypair

NOW = 1_700_000_000.0

HOME_YAML = """\
groups:
- name: LR
  spec:
    attributes:
      location:
        includes:
        - name: livingroom
      type:
        includes:
        - name: lock
        - name: TV
        - name: bulb
- name: GD
  spec:
    attributes:
      type:
        includes:
        - name: laptop
        - name: console
- name: FD
  spec:
    attributes:
      relation:
        includes:
        - name: friend
policies:
- name: policy1
  source: LR
  destination: FD
  capability:
    excludes:
    - name: lock_setconf
- name: policy2
  source: GD
  destination: FD
  capability:
    includes:
    - name: laptop_getinference
      limit: 10 req/sec
"""

TV_CAPS = frozenset({"tv_switch", "tv_volume", "tv_channel", "tv_status"})
CONSOLE_CAPS = frozenset({"console_play", "console_status"})


def native(dev_id, caps, port, **attrs):
    return DeviceRecord(dev_id, attrs, frozenset(caps), f"127.0.0.1:{port}")


def home_fleet():
    return [
        native("lr-lock", make_adapter("lock").capabilities, 9001, location="livingroom", type="lock"),
        native("lr-tv", TV_CAPS, 9002, location="livingroom", type="tv"),
        native("lr-bulb", make_adapter("bulb").capabilities, 9003, location="livingroom", type="bulb"),
        native("laptop", make_adapter("laptop").capabilities, 9004, location="office", type="laptop"),
        native("console", CONSOLE_CAPS, 9005, location="office", type="console"),
    ]


def friend(dev_id="phone-1"):
    return DeviceRecord(dev_id, {"relation": "friend", "type": "phone"}, kind=GUEST)


@pytest.fixture
def home_doc():
    return parse_policy_document(HOME_YAML)


@pytest.fixture
def home_store(home_doc):
    return PolicyStore.from_document(home_doc, home_fleet())


@pytest.fixture
def service():
    return TokenService(generate_keypair())


# -- acceptance report ---------------------------------------------------------

_CRITERIA: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    _CRITERIA[number] = (ok, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        ok, detail = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
