import hashlib
from contextlib import contextmanager

import pytest

from pichain.chain import Transaction, TxKind
from pichain.miner import MinerServer
from pichain.policy import GeoFence, PolicyConfig, Role
from pichain.registry import DeviceRecord, DeviceStatus
from pichain.sms import report_at
from pichain.wire import NodeIdentity

IMEI_A = "123456789012345"
PHONE_A = "+61400000001"
IMEI_B = "543210987654321"
PHONE_B = "+61400000002"


def make_identity(role: Role, tag: str) -> NodeIdentity:
    node_id = hashlib.sha256(f"node:{tag}".encode()).hexdigest()
    secret = hashlib.sha256(f"secret:{tag}".encode()).digest()
    return NodeIdentity(node_id, role, secret)


@pytest.fixture
def parent():
    return make_identity(Role.PARENT, "parent")


@pytest.fixture
def gateway():
    return make_identity(Role.GATEWAY, "gateway")


@pytest.fixture
def gateway2():
    return make_identity(Role.GATEWAY, "gateway2")


@pytest.fixture
def miner_node():
    return make_identity(Role.MINER, "miner")


@pytest.fixture
def identities(parent, gateway, gateway2, miner_node):
    return {n.node_id: n for n in (parent, gateway, gateway2, miner_node)}


@pytest.fixture
def config(parent, gateway, gateway2):
    return PolicyConfig(
        fence=GeoFence(0.0, 0.0, 50.0),
        parent_node_id=parent.node_id,
        gateway_node_ids=(gateway.node_id, gateway2.node_id),
    )


def register_tx(submitter: str, imei: str, phone: str, at: int) -> Transaction:
    record = DeviceRecord(imei, phone, DeviceStatus.ACTIVE, at)
    return Transaction(TxKind.REGISTER, submitter, record, at)


def remove_tx(submitter: str, imei: str, phone: str, at: int) -> Transaction:
    record = DeviceRecord(imei, phone, DeviceStatus.REMOVED, at)
    return Transaction(TxKind.REMOVE, submitter, record, at)


def location_tx(
    submitter: str, imei: str, phone: str, lat: float, lon: float, epoch: int
) -> Transaction:
    report = report_at(imei, phone, lat, lon, epoch)
    return Transaction(TxKind.LOCATION, submitter, report, epoch)


@contextmanager
def running_miner(chain, identities, config, chain_path=None, trace=False):
    server = MinerServer(
        chain, identities, config, chain_path=chain_path, trace=trace
    )
    server.start()
    try:
        yield server
    finally:
        server.stop()
