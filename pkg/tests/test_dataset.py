import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from regime_diffusion import dataset as D
from regime_diffusion import plant as P


def test_collection_is_deterministic(params):
    a = D.collect_episode(params, 0.5, 0.2, 7)
    b = D.collect_episode(params, 0.5, 0.2, 7)
    for name in ("chi", "chid", "tau", "H", "chi_ddot", "m_p"):
        assert np.array_equal(getattr(a, name), getattr(b, name))
    assert a.labels == b.labels


def test_episode_records_plant_residual(short_episodes, params):
    ep = short_episodes[4]
    assert len(ep) == 150
    assert np.allclose(ep.H, ep.tau - ep.chi_ddot * np.asarray(params.M_bar), atol=1e-12)
    # Inputs follow a zero-order hold at half the plant rate.
    assert np.array_equal(ep.tau[0::2], ep.tau[1::2])


def test_labels_follow_payload_mass(short_episodes):
    for ep in short_episodes:
        attached = np.array([lab.endswith("-attached") for lab in ep.labels])
        assert np.array_equal(attached & (ep.meta["payload"] > 0), ep.m_p > 0)


def test_pickdrop_schedule_inside_duration():
    rng = np.random.default_rng(0)
    events = D.payload_schedule(rng, 60.0, 0.2, "pickdrop")
    times = [t for t, _ in events]
    assert times == sorted(times) and 0 <= times[0] and times[-1] < 60.0
    kinds = [k for _, k in events]
    assert all(a != b for a, b in zip(kinds, kinds[1:]))


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 60), S=st.integers(1, 8), L=st.integers(1, 10), stride_frac=st.floats(0, 1))
def test_segment_count_and_alignment(n, S, L, stride_frac):
    stride = 1 + int(stride_frac * (S - 1))
    t = np.arange(n, dtype=float)
    chi = np.tile(t[:, None], (1, 8))
    ep = D.Episode(t, chi, chi, chi, chi, chi, np.zeros(n), ["r"] * n)
    segs = D.segment([ep], S, stride, L)
    assert len(segs) == D.segment_count(n, S, stride, L) == max(0, (n - S - L) // stride + 1)
    for s in segs:
        assert s.hist_zeta.shape == (L + 1, 16) and s.H.shape == (S, 8)
        # History ends at the window's first step; the previous input lags by one.
        assert s.hist_zeta[-1, 0] == s.start == s.H[0, 0]
        assert s.hist_tau[-1, 0] == s.start - 1


def test_segment_rejects_bad_window():
    with pytest.raises(D.DatasetError):
        D.segment([], 4, 5, 2)


def test_split_by_episode_is_disjoint_and_deterministic():
    a = D.split_episodes(9, 3)
    assert a == D.split_episodes(9, 3)
    flat = a["train"] + a["val"] + a["test"]
    assert sorted(flat) == list(range(9))
    assert len(a["val"]) >= 1 and len(a["test"]) >= 1


def test_normalizer_round_trip(short_segments, short_normalizer):
    b = D.stack_segments(short_segments)
    z = short_normalizer.apply("resid", b.H)
    assert np.allclose(short_normalizer.invert("resid", z), b.H, atol=1e-10)
    flat = z.reshape(-1, 8)
    assert np.allclose(flat.mean(axis=0), 0, atol=1e-9)
    back = D.Normalizer.from_dict(short_normalizer.to_dict())
    assert np.array_equal(back.resid_std, short_normalizer.resid_std)


def test_normalizer_needs_data():
    with pytest.raises(D.DatasetError):
        D.fit_normalizer([])


def test_save_load_is_bit_exact(tmp_path, short_episodes):
    D.save_dataset(tmp_path, short_episodes[:2], {"note": 1})
    manifest, back = D.load_dataset(tmp_path)
    assert manifest["note"] == 1
    for a, b in zip(short_episodes, back):
        assert np.array_equal(a.H, b.H) and np.array_equal(a.chi, b.chi) and a.labels == b.labels
        assert b.meta["seed"] == a.meta["seed"]
    h = D.manifest_hash(tmp_path)
    D.save_dataset(tmp_path, short_episodes[:2], {"note": 1})
    assert D.manifest_hash(tmp_path) == h


def test_tampered_episode_detected(tmp_path, short_episodes):
    D.save_dataset(tmp_path, short_episodes[:1], {})
    f = tmp_path / "episode_000.csv"
    lines = f.read_text().splitlines()
    lines[5] = lines[5].replace(",", ",1", 1)
    f.write_text("\n".join(lines) + "\n")
    with pytest.raises(D.IntegrityError):
        D.load_dataset(tmp_path)


def test_malformed_csv_reports_line(tmp_path, short_episodes):
    D.write_episode_csv(tmp_path / "e.csv", short_episodes[0])
    lines = (tmp_path / "e.csv").read_text().splitlines()
    lines[3] = "nope," + lines[3].split(",", 1)[1]
    (tmp_path / "e.csv").write_text("\n".join(lines) + "\n")
    with pytest.raises(D.CsvParseError) as info:
        D.read_episode_csv(tmp_path / "e.csv")
    assert info.value.line == 4


def test_schema_version_checked(tmp_path, short_episodes):
    D.save_dataset(tmp_path, short_episodes[:1], {"schema_version": 99})
    with pytest.raises(D.SchemaVersionError):
        D.load_dataset(tmp_path)


def test_collection_rejects_unknown_family(params):
    with pytest.raises(D.DatasetError):
        D.collect_episode(params, 1.0, 0.0, 0, trajectory_family="spiral")


def test_reference_derivatives_consistent():
    ref = D.RandomReference(np.random.default_rng(0))
    h = 1e-5
    a, b, c = ref(1.0 - h), ref(1.0), ref(1.0 + h)
    assert np.allclose((c.chi - a.chi) / (2 * h), b.chid, atol=1e-7)
    assert np.allclose((c.chid - a.chid) / (2 * h), b.chidd, atol=1e-6)
    assert np.all(np.abs(b.chi[6:]) <= np.pi / 2 + 1e-12)


def test_episode_length_mismatch_rejected():
    with pytest.raises(D.DatasetError):
        D.Episode(np.zeros(3), np.zeros((2, 8)), np.zeros((3, 8)), np.zeros((3, 8)), np.zeros((3, 8)),
                  np.zeros((3, 8)), np.zeros(3), ["a"] * 3)


def test_plant_rate_metadata(short_episodes):
    assert short_episodes[0].meta["dt"] == P.DEFAULT_DT
