import struct

import numpy as np
import pytest
import torch

from app.buffers import BUFFER_MAGIC, GeneratedBuffer, ReplayBuffer, Transition
from app.errors import DatasetError, PreconditionError


def numbered(count: int, capacity: int, skill_dim: int = 0) -> ReplayBuffer:
    buffer = ReplayBuffer(capacity, 2, 1, skill_dim)
    for i in range(count):
        buffer.add(Transition(
            state=np.full(2, i), action=np.full(1, -i), reward=float(i), next_state=np.full(2, i + 1),
            skill=np.full(skill_dim, 0.5) if skill_dim else None,
        ))
    return buffer


def test_ring_keeps_newest_in_order():
    buffer = numbered(5, capacity=3)
    assert len(buffer) == 3
    assert buffer.all()["rewards"].tolist() == [2.0, 3.0, 4.0]


def test_sampling_empty_buffer_fails():
    buffer = ReplayBuffer(4, 2, 1)
    with pytest.raises(PreconditionError):
        buffer.sample(2, np.random.default_rng(0))


def test_sample_shapes_and_membership():
    buffer = numbered(10, capacity=10, skill_dim=3)
    batch = buffer.sample(32, np.random.default_rng(0))
    assert batch["states"].shape == (32, 2)
    assert batch["skills"].shape == (32, 3)
    assert torch.equal(batch["states"][:, 0], batch["rewards"])


def test_save_load_preserves_chronological_order(tmp_path):
    buffer = numbered(7, capacity=4, skill_dim=2)
    path = tmp_path / "d.lrbf"
    buffer.save(path)

    header = path.read_bytes()[:28]
    magic, version, s, a, z, count = struct.unpack("<4sIIIIQ", header)
    assert (magic, version, s, a, z, count) == (BUFFER_MAGIC, 1, 2, 1, 2, 4)

    loaded = ReplayBuffer.load(path)
    assert len(loaded) == 4
    for key, values in buffer.all().items():
        assert torch.equal(loaded.all()[key], values), key


def test_empty_buffer_file(tmp_path):
    path = tmp_path / "empty.lrbf"
    ReplayBuffer(1, 3, 2).save(path)
    assert path.stat().st_size == 28
    loaded = ReplayBuffer.load(path)
    assert len(loaded) == 0 and loaded.state_dim == 3 and loaded.action_dim == 2


def test_load_rejects_corrupt_files(tmp_path):
    path = tmp_path / "d.lrbf"
    numbered(3, capacity=3).save(path)
    data = path.read_bytes()
    row = 4 * (2 + 1 + 0 + 1 + 2)

    path.write_bytes(data[:10])
    with pytest.raises(DatasetError, match="header"):
        ReplayBuffer.load(path)

    path.write_bytes(b"NOPE" + data[4:])
    with pytest.raises(DatasetError) as e:
        ReplayBuffer.load(path)
    assert e.value.offset == 0

    path.write_bytes(data[:-5])
    with pytest.raises(DatasetError) as e:
        ReplayBuffer.load(path)
    assert e.value.offset == 28 + 2 * row

    path.write_bytes(data + b"\0\0\0\0")
    with pytest.raises(DatasetError, match="Trailing"):
        ReplayBuffer.load(path)

    corrupted = bytearray(data)
    corrupted[28 + row:28 + row + 4] = np.float32(np.nan).tobytes()
    path.write_bytes(bytes(corrupted))
    with pytest.raises(DatasetError) as e:
        ReplayBuffer.load(path)
    assert e.value.offset == 28 + row


def test_extend_checks_dims_and_drops_mismatched_skills():
    target = ReplayBuffer(10, 2, 1, skill_dim=4)
    target.extend(numbered(3, capacity=3, skill_dim=2))
    assert len(target) == 3
    assert target.all()["skills"].abs().sum() == 0

    with pytest.raises(DatasetError):
        ReplayBuffer(10, 3, 1).extend(numbered(3, capacity=3))


def test_truncated_keeps_oldest_fraction():
    buffer = numbered(10, capacity=10)
    half = buffer.truncated(0.5)
    assert half.all()["rewards"].tolist() == [0.0, 1.0, 2.0, 3.0, 4.0]
    assert len(buffer.truncated(1.0)) == 10


def test_sample_states_come_from_buffer(point_data):
    buffer = point_data(50)
    states = buffer.sample_states(20, np.random.default_rng(1))
    stored = {tuple(s) for s in buffer.all()["states"].tolist()}
    assert all(tuple(s) in stored for s in states.tolist())


def test_generated_buffer_wraps():
    buffer = GeneratedBuffer(4, state_dim=2, action_dim=1, skill_dim=1)
    with pytest.raises(PreconditionError):
        buffer.sample(2, np.random.default_rng(0))
    states = torch.arange(6, dtype=torch.float32).unsqueeze(-1).repeat(1, 2)
    buffer.add_batch(states, torch.zeros(6, 1), torch.zeros(6, 1), states + 1)
    assert len(buffer) == 4
    assert sorted(buffer.states[:, 0].tolist()) == [2.0, 3.0, 4.0, 5.0]
    batch = buffer.sample(8, np.random.default_rng(0))
    assert torch.equal(batch["next_states"], batch["states"] + 1)
