import dataclasses

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dpiprint.analytics import (
    NOISE, OrderMismatch, aggregate_repeats, classical_mds, cluster, diff_fingerprints, distance_matrix, masked_hamming,
    mds_2d, scoped_distributions, stress, write_clusters_csv, write_histograms_csv, write_mds_csv,
)
from dpiprint.analyzer import BLACKHOLE, RST, VALID, Fingerprint, Outcome
from dpiprint.builtin import load_builtin
from dpiprint.generate import generate_all

from conftest import analyze_world, make_target

TRIT = st.sampled_from([1, 0, -1])


def fp(target, bits, probes=None):
    return Fingerprint(target, tuple(probes or (f"p{i}" for i in range(len(bits)))), tuple(bits))


def hamming_oracle(a, b):
    raw = conclusive = 0
    for i in range(len(a)):
        if a[i] == -1 or b[i] == -1:
            continue
        conclusive += 1
        if a[i] != b[i]:
            raw += 1
    return raw, conclusive


def test_masked_hamming_examples():
    d = masked_hamming(fp("a", [1, 0, -1]), fp("b", [1, 1, 1]))
    assert (d.raw, d.conclusive, d.normalized) == (1, 2, 0.5)
    assert masked_hamming(fp("a", [1, 0]), fp("b", [1, 0])).raw == 0
    d = masked_hamming(fp("a", [-1, 1]), fp("b", [0, -1]))
    assert (d.raw, d.normalized, d.flagged) == (0, 0.0, True)
    with pytest.raises(OrderMismatch):
        masked_hamming(fp("a", [1]), fp("b", [1], probes=["q"]))


@given(st.lists(st.tuples(TRIT, TRIT), min_size=40, max_size=40))
def test_masked_hamming_matches_oracle(pairs):
    a, b = [x for x, _ in pairs], [y for _, y in pairs]
    d = masked_hamming(a, b)
    assert (d.raw, d.conclusive) == hamming_oracle(a, b)


@given(st.lists(st.tuples(TRIT, TRIT, TRIT), min_size=1, max_size=30))
def test_masked_hamming_symmetric_and_zero_on_self(rows):
    a, b, c = ([r[k] for r in rows] for k in range(3))
    assert masked_hamming(a, b) == masked_hamming(b, a)
    assert masked_hamming(a, a).raw == 0
    # triangle inequality holds when the middle point has no unknown bits
    full = [x if x != -1 else 0 for x in c]
    assert masked_hamming(a, b).raw <= masked_hamming(a, full).raw + masked_hamming(full, b).raw


def test_distance_matrix_matches_pairwise():
    rng = np.random.default_rng(0)
    fps = [fp(f"t{i}", rng.integers(-1, 2, 25).tolist()) for i in range(12)]
    raw, conc = distance_matrix(fps)
    for i in range(12):
        for j in range(12):
            assert (raw[i, j], conc[i, j]) == hamming_oracle(fps[i].bits, fps[j].bits)


def test_scoped_distributions_shared_netblock():
    fps = [fp(f"t{i}", [i % 2, 1, 0]) for i in range(6)]
    meta = {f.target: {"netblock": "10.0.0.0/24"} for f in fps}
    h = scoped_distributions(fps, meta)
    assert set(h) == {"all", "netblock"}
    assert np.allclose(h["all"], h["netblock"])
    assert set(scoped_distributions(fps, {})) == {"all"}


def test_scoped_distributions_two_ases(zoo):
    profiles = [zoo["zeek-like"], zoo["snort-like"]]
    targets = [make_target(i + 1, block=k, meta=(("asn", f"AS{64500 + k}"),)) for k in range(2) for i in range(4)]
    world = {t: [profiles[int(t.address.split(".")[2]) - 113]] for t in targets}
    res = analyze_world(world, load_builtin("http"))
    fps = res.fingerprints()
    meta = {t.key: dict(t.metadata) for t in targets}
    h = scoped_distributions(fps, meta)
    assert h["asn"][0] == pytest.approx(1.0)
    assert h["all"][0] < 1.0


def two_groups(n=25, extra=()):
    a = [fp(f"a{i:02d}", [0] * 40) for i in range(n)]
    b = [fp(f"b{i:02d}", [1] * 20 + [0] * 20) for i in range(n)]
    return a + b + list(extra)


def test_cluster_two_separated_groups():
    res = cluster(two_groups(), min_cluster_size=5)
    assert (res.n_clusters, res.n_noise) == (2, 0)
    labels = res.label_of()
    assert len({labels[f"a{i:02d}"] for i in range(25)}) == 1
    assert labels["a00"] != labels["b00"]


def outliers(count, seed=1):
    rng = np.random.default_rng(seed)
    a, b = np.zeros(40), np.array([1] * 20 + [0] * 20)
    found = []
    while len(found) < count:
        x = rng.integers(0, 2, 40)
        # farther from both groups than the groups are from each other
        if min((x != a).sum(), (x != b).sum()) > 20 and all((x != y).sum() >= 10 for y in found):
            found.append(x)
    return [fp(f"z{i}", x.tolist()) for i, x in enumerate(found)]


def test_cluster_outliers_are_noise():
    res = cluster(two_groups(extra=outliers(3)), min_cluster_size=5)
    labels = res.label_of()
    assert res.n_clusters == 2
    assert all(labels[f"z{i}"] == NOISE for i in range(3))
    assert res.n_noise == 3


def test_all_unknown_fingerprint_does_not_bridge_clusters():
    blank = fp("u0", [-1] * 40)
    for method, kw in (("hdbscan", {}), ("single-linkage", {"linkage_threshold": 2})):
        res = cluster(two_groups(extra=[blank]), 5, method=method, **kw)
        assert res.n_clusters == 2 and res.label_of()["u0"] == NOISE
    assert cluster([fp(f"u{i}", [-1, -1]) for i in range(5)], 5).n_noise == 5


def test_cluster_is_input_order_invariant():
    fps = two_groups(extra=outliers(3))
    a = cluster(fps, 5).label_of()
    b = cluster(list(reversed(fps)), 5).label_of()
    assert a == b


def test_single_linkage_fallback():
    res = cluster(two_groups(extra=outliers(3)), 5, method="single-linkage", linkage_threshold=2)
    assert (res.n_clusters, res.n_noise) == (2, 3)
    with pytest.raises(ValueError):
        cluster(two_groups(), 5, method="kmeans")
    with pytest.raises(ValueError):
        cluster(two_groups(n=1), 5)


def test_cluster_rollups():
    fps = two_groups(n=5)
    meta = {f.target: {"asn": "AS1" if f.target < "b" else "AS2", "country": "XX"} for f in fps}
    res = cluster(fps, 5, metadata=meta)
    assert sorted(r["asn"] for r in res.rollups.values()) == [["AS1"], ["AS2"]]
    assert all(r["size"] == 5 and r["country"] == ["XX"] for r in res.rollups.values())


def test_mds_equilateral():
    coords, degenerate = mds_2d([fp("a", [0, 0, 0, 0]), fp("b", [1, 1, 0, 0]), fp("c", [0, 1, 1, 0])])
    assert not degenerate
    pts = np.array(list(coords.values()))
    e = [np.linalg.norm(pts[i] - pts[j]) for i, j in ((0, 1), (0, 2), (1, 2))]
    assert max(e) - min(e) <= 1e-6 * max(e)
    assert np.allclose(pts.mean(axis=0), 0)


def test_mds_identical_is_degenerate():
    coords, degenerate = mds_2d([fp(f"t{i}", [1, 0, 1]) for i in range(4)])
    assert degenerate and all(c == (0.0, 0.0) for c in coords.values())
    with pytest.raises(ValueError):
        mds_2d([fp("a", [1]), fp("b", [0])])


def test_mds_beats_random_embeddings():
    rng = np.random.default_rng(5)
    fps = [fp(f"t{i}", rng.integers(0, 2, 30).tolist()) for i in range(20)]
    raw, _ = distance_matrix(fps)
    coords, _ = classical_mds(raw)
    ours = stress(coords, raw)
    scale = raw.max()
    assert all(ours <= stress(rng.uniform(-scale, scale, (20, 2)), raw) for _ in range(100))


def test_mds_reorder_invariant_up_to_rotation():
    rng = np.random.default_rng(8)
    fps = [fp(f"t{i}", rng.integers(0, 2, 16).tolist()) for i in range(9)]
    a, _ = mds_2d(fps)
    b, _ = mds_2d(fps[::-1])

    def dists(c):
        pts = np.array([c[f"t{i}"] for i in range(9)])
        return np.linalg.norm(pts[:, None] - pts[None], axis=-1)

    assert np.allclose(dists(a), dists(b), atol=1e-6)


def test_aggregate_repeats():
    v, r, h = Outcome(VALID), Outcome(RST), Outcome(BLACKHOLE)
    outs = {("t", "p", "test"): [v, r, v], ("t", "p", "control"): [v, v, v], ("t", "q", "test"): [h, r, h]}
    assert aggregate_repeats(outs, 1) == {k: vals[0] for k, vals in outs.items()}
    k3 = aggregate_repeats(outs, 3)
    assert k3[("t", "p", "test")] == r and k3[("t", "p", "control")] == v
    assert k3[("t", "q", "test")].category in (RST, BLACKHOLE)
    with pytest.raises(ValueError):
        aggregate_repeats(outs, 0)


def test_diff_identical_and_absent():
    e0 = {"a": fp("a", [1, 0, 1]), "b": fp("b", [0, 0, 0])}
    e1 = {"a": fp("a", [1, 0, 1])}
    changes = diff_fingerprints([e0, e0, e1])
    assert [c.changed for c in changes[:2]] == [0, 0]
    assert changes[2].changed == 0 and changes[3].absent
    with pytest.raises(OrderMismatch):
        diff_fingerprints([e0, {"a": fp("a", [1, 0, 1], probes=["x", "y", "z"])}])


def test_diff_after_overlap_policy_change(zoo):
    base = zoo["zeek-like"]
    assert base.tcp_overlap_policy == "FirstWins"
    changed = dataclasses.replace(base, tcp_overlap_policy="LastWins")
    overlap = [c.probe for c in generate_all("http") if c.layer == "TCP" and c.params.get("t") == "overlapping"]
    probes = load_builtin("http")[:10] + overlap
    targets = [make_target(i) for i in (1, 2)]
    epochs = []
    for prof in (base, changed):
        res = analyze_world({t: [prof] for t in targets}, probes)
        epochs.append({f.target: f for f in res.fingerprints()})
    order = epochs[0][targets[0].key].probes
    sensitive = {i for i, pid in enumerate(order) if pid.startswith("Fragment[l:TCP;t:overlapping")}
    for change in diff_fingerprints(epochs):
        assert set(change.positions) == sensitive


def test_output_files(tmp_path):
    fps = two_groups(n=5)
    res = cluster(fps, 5)
    write_clusters_csv(tmp_path / "c.csv", res)
    assert len((tmp_path / "c.csv").read_text().splitlines()) == 11
    coords, _ = mds_2d(fps)
    write_mds_csv(tmp_path / "m.csv", coords)
    assert (tmp_path / "m.csv").read_text().startswith("target,x,y\n")
    write_histograms_csv(tmp_path / "h.csv", scoped_distributions(fps, {}))
    assert (tmp_path / "h.csv").read_text().splitlines()[0] == "distance,all"
