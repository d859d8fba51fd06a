import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oodkit import data
from oodkit.diffusion import fast_schedule
from oodkit.errors import (
    BadMagicError,
    CorruptCheckpointError,
    NonFiniteLossError,
    TruncatedPayloadError,
    VersionMismatchError,
)
from oodkit.nn import DenoiserNet
from oodkit.rng import RngHandle
from oodkit.training import (
    CheckpointManifest,
    TrainConfig,
    decode_checkpoint,
    draw_training_noise,
    encode_checkpoint,
    load_checkpoint,
    lsimple_loss,
    net_from_manifest,
    net_to_manifest,
    save_checkpoint,
    train_ddpm,
)

SMALL = dict(hidden_dims=(16,), time_embed_dim=4, time_hidden_dim=8, image_shape=(8, 8))


class ExactEpsNet:
    """Inverts the forward process using the clean batch it was built with."""

    def __init__(self, x0, sched):
        self.x0, self.sched = x0, sched

    def forward_cached(self, x_t, ts):
        ab = np.array([self.sched.alpha_bar(t) for t in ts])[:, None, None]
        return (x_t - np.sqrt(ab) * self.x0) / np.sqrt(1 - ab), None


class ZeroNet:
    def forward_cached(self, x_t, ts):
        return np.zeros_like(x_t), None


def test_lsimple_oracle_net_zero_loss(rng):
    sched = fast_schedule()
    x0 = rng.uniform(-1, 1, (8, 4, 4)).astype(np.float32)
    loss, _ = lsimple_loss(ExactEpsNet(x0, sched), x0, sched, RngHandle(0), accumulate=False)
    assert loss < 1e-9


def test_lsimple_zero_net_unit_loss(rng):
    sched = fast_schedule()
    x0 = rng.uniform(-1, 1, (64, 16, 16)).astype(np.float32)
    assert x0.size >= 10_000
    loss, _ = lsimple_loss(ZeroNet(), x0, sched, RngHandle(4), accumulate=False)
    assert abs(loss - 1.0) <= 0.05


def test_lsimple_batch_order_invariant(rng):
    sched = fast_schedule()
    net = DenoiserNet((4, 4), (8,), 4, 4, seed=1, zero_output=False)
    x0 = rng.uniform(-1, 1, (6, 4, 4)).astype(np.float32)
    ids = np.arange(6)
    perm = rng.permutation(6)
    a, _ = lsimple_loss(net, x0, sched, RngHandle(2), sample_ids=ids, accumulate=False)
    b, _ = lsimple_loss(net, x0[perm], sched, RngHandle(2), sample_ids=ids[perm], accumulate=False)
    assert a == pytest.approx(b, rel=1e-12)


def test_lsimple_empty_batch():
    with pytest.raises(ValueError):
        lsimple_loss(ZeroNet(), np.zeros((0, 4, 4)), fast_schedule(), RngHandle(0))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32), st.integers(1, 5))
def test_lsimple_nonnegative_and_grads_returned(seed, n):
    sched = fast_schedule()
    net = DenoiserNet((4, 4), (8,), 4, 4, seed=seed % 7, zero_output=False)
    x0 = np.random.default_rng(seed).uniform(-1, 1, (n, 4, 4)).astype(np.float32)
    loss, grads = lsimple_loss(net, x0, sched, RngHandle(seed))
    assert loss >= 0
    assert set(grads) == {p.name for p in net.params}


def test_training_noise_draw_range_and_determinism():
    h = RngHandle(9).child("sample", 3)
    t1, e1 = draw_training_noise(h, (4, 4), 100)
    t2, e2 = draw_training_noise(h, (4, 4), 100)
    assert t1 == t2 and 1 <= t1 <= 100
    np.testing.assert_array_equal(e1, e2)
    ts = {draw_training_noise(RngHandle(9).child("sample", i), (1,), 5)[0] for i in range(200)}
    assert ts == {1, 2, 3, 4, 5}


def _blobs(n, hw=8, seed=1):
    return data.generate(data.DatasetSpec("blobs", n, hw, hw, seed))


def test_train_same_seed_byte_identical(tmp_path):
    ds = _blobs(64)
    paths = []
    for k in range(2):
        p = tmp_path / f"run{k}.ckpt"
        train_ddpm(TrainConfig.fast(epochs=2, batch_size=16, seed=5, checkpoint_path=str(p), **SMALL), ds.images)
        paths.append(p)
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_train_zero_epochs_equals_init():
    m, recs = train_ddpm(TrainConfig.fast(epochs=0, seed=3, **SMALL), _blobs(16).images)
    assert recs == []
    init = DenoiserNet((8, 8), (16,), 4, 8, seed=3)
    for p in init.params:
        np.testing.assert_array_equal(m.arrays[p.name], p.value)


def test_train_non_finite_loss_aborts():
    imgs = np.full((8, 8, 8), np.nan, np.float32)
    with pytest.raises(NonFiniteLossError):
        train_ddpm(TrainConfig.fast(epochs=1, batch_size=8, **SMALL), imgs)


def test_train_rejects_mismatched_shape():
    with pytest.raises(ValueError):
        train_ddpm(TrainConfig.fast(epochs=1, **SMALL), np.zeros((4, 16, 16), np.float32))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    fast = TrainConfig.fast()
    assert (fast.T, fast.beta_start, fast.beta_end) == (100, 0.015, 0.195)
    assert TrainConfig().schedule().T == 1000


def test_constant_images_two_epochs():
    # Desk architecture. Two epochs of 64 images is only a handful of Adam
    # steps, so this uses a small batch and a larger step to get past the
    # warm-up plateau of the zero-initialised output layer.
    imgs = np.full((64, 16, 16), 0.5, np.float32)
    _, recs = train_ddpm(TrainConfig.fast(epochs=2, batch_size=4, lr=3e-3, seed=0), imgs)
    assert recs[1].mean_loss < recs[0].mean_loss


def test_constant_images_loss_falls_clearly():
    imgs = np.full((64, 16, 16), 0.5, np.float32)
    _, recs = train_ddpm(TrainConfig.fast(epochs=20, batch_size=8, lr=1e-3, seed=0), imgs)
    L = [r.mean_loss for r in recs]
    assert np.mean(L[-3:]) < np.mean(L[:3]) - 0.1


def test_moving_average_trend_500_images():
    ds = data.generate(data.DatasetSpec("blobs", 500, 16, 16, 1))
    _, recs = train_ddpm(TrainConfig.fast(epochs=30, seed=0), ds.images)
    L = np.array([r.mean_loss for r in recs])
    assert np.all(L >= 0)
    ma = np.convolve(L, np.ones(5) / 5, mode="valid")
    assert np.all(np.diff(ma) <= 0)


def test_progress_callback_and_records():
    seen = []
    _, recs = train_ddpm(TrainConfig.fast(epochs=2, batch_size=16, **SMALL), _blobs(32).images, progress=seen.append)
    assert [r.epoch for r in recs] == [1, 2] and seen == recs
    assert all(r.wall_seconds >= 0 for r in recs)


# --- checkpoints ---------------------------------------------------------------


def _manifest(rng, kind="ddpm"):
    arrays = {"a": rng.standard_normal((2, 3)).astype(np.float32), "b.bias": rng.standard_normal(4).astype(np.float32)}
    return CheckpointManifest(kind, arrays, seed=7, beta_start=0.015, beta_end=0.195, T=100)


def test_checkpoint_byte_layout(rng):
    m = CheckpointManifest("memae", {"w": np.array([[1.0, -2.0]], np.float32)}, 11, 0.1, 0.2, 50)
    want = (b"OODCKPT\x00" + struct.pack("<III", 1, 2, 1)
            + struct.pack("<I", 1) + b"w" + struct.pack("<I", 2) + struct.pack("<QQ", 1, 2)
            + struct.pack("<ff", 1.0, -2.0) + struct.pack("<QddI", 11, 0.1, 0.2, 50))
    assert encode_checkpoint(m) == want


def test_checkpoint_round_trip(tmp_path, rng):
    m = _manifest(rng)
    p = tmp_path / "x.ckpt"
    save_checkpoint(m, p)
    back = load_checkpoint(p)
    assert back.equals(m)
    for k in m.arrays:
        assert back.arrays[k].tobytes() == m.arrays[k].tobytes()
    p2 = tmp_path / "y.ckpt"
    save_checkpoint(back, p2)
    assert p.read_bytes() == p2.read_bytes()
    assert not list(tmp_path.glob("*.tmp"))


@settings(max_examples=40, deadline=None)
@given(
    st.dictionaries(
        st.text(min_size=1, max_size=8),
        st.lists(st.integers(1, 3), min_size=0, max_size=3),
        min_size=0, max_size=4,
    ),
    st.integers(0, 2**64 - 1),
    st.sampled_from(["ddpm", "ae", "memae"]),
)
def test_checkpoint_round_trip_random(shapes, seed, kind):
    r = np.random.default_rng(seed % 1000)
    arrays = {k: r.standard_normal(tuple(s)).astype(np.float32) for k, s in shapes.items()}
    m = CheckpointManifest(kind, arrays, seed, 0.001, 0.02, 1000)
    buf = encode_checkpoint(m)
    back = decode_checkpoint(buf)
    assert back.equals(m)
    assert encode_checkpoint(back) == buf


def test_checkpoint_errors(tmp_path, rng):
    buf = encode_checkpoint(_manifest(rng))
    with pytest.raises(BadMagicError):
        decode_checkpoint(b"XXDCKPT\x00" + buf[8:])
    bumped = buf[:8] + struct.pack("<I", 99) + buf[12:]
    with pytest.raises(VersionMismatchError):
        decode_checkpoint(bumped)
    with pytest.raises(TruncatedPayloadError):
        decode_checkpoint(buf[:-4])
    with pytest.raises(CorruptCheckpointError):
        decode_checkpoint(buf + b"\x00")
    p = tmp_path / "t.ckpt"
    p.write_bytes(buf[:-4])
    with pytest.raises(TruncatedPayloadError):
        load_checkpoint(p)
    # the three named failures are distinct types
    assert len({BadMagicError, VersionMismatchError, TruncatedPayloadError}) == 3
    assert not issubclass(BadMagicError, TruncatedPayloadError)


def test_net_manifest_round_trip(rng):
    net = DenoiserNet((8, 8), (16, 12), 4, 8, seed=2, zero_output=False)
    sched = fast_schedule()
    back = net_from_manifest(decode_checkpoint(encode_checkpoint(net_to_manifest(net, 2, sched))))
    x = rng.standard_normal((3, 8, 8)).astype(np.float32)
    np.testing.assert_array_equal(back(x, np.array([1, 50, 100])), net(x, np.array([1, 50, 100])))
    assert back.hidden_dims == (16, 12)
    with pytest.raises(ValueError):
        net_from_manifest(_manifest(rng, "ae"))
