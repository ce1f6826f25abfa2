import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from causil import clinical, rng
from causil.core import pool_tuples, read_ndjson, write_ndjson
from causil.errors import DegenerateCut, DomainError, EmptySelection, ParseError, SchemaError, ShapeError

FIX = Path(__file__).parent / "fixtures"
PSV = FIX / "psv"
GOLDEN_BATCH = FIX / "golden" / "clinical_batch.ndjson"

HEADER = "HR|O2Sat|SBP|MAP|DBP|Resp|Lactate|ICULOS"


def write(path, rows, header=HEADER):
    path.write_text(header + "\n" + "\n".join(rows) + "\n")
    return path


@pytest.fixture(scope="module")
def records():
    return clinical.ingest_psv(PSV)


@pytest.fixture(scope="module")
def imputed(records):
    return clinical.impute_all(records)


def golden_batch(imputed):
    kept, _ = imputed
    spec = clinical.fit_discretization(kept)
    return clinical.build_task([clinical.discretize(r, spec) for r in kept], seed=0)


def random_discrete_records(n_patients, rows, seed, p_u=0.5):
    g = np.random.default_rng(seed)
    out = []
    for i in range(n_patients):
        codes = np.column_stack([g.integers(0, r, rows) for r in clinical.RADICES])
        out.append(clinical.DiscreteRecord(f"r{i:03d}", np.arange(1, rows + 1), codes,
                                           (g.random(rows) < p_u).astype(np.int64)))
    return out


# ---------------------------------------------------------------------------
# ingestion


def test_two_row_file(tmp_path):
    p = write(tmp_path / "a.psv", ["80|97|120|85|60|16|1.1|1", "82|96|118|84|61|17|1.3|2"])
    r = clinical.read_psv(p)
    assert r.pid == "a" and r.n_rows == 2
    assert np.array_equal(r.iculos, [1, 2])
    assert r.values["HR"].tolist() == [80.0, 82.0]


def test_nan_cells_are_missing(tmp_path):
    p = write(tmp_path / "a.psv", ["NaN|97|120|85|60||1.1|1", "82|nan|118|84|61|17|NaN|2"])
    r = clinical.read_psv(p)
    assert math.isnan(r.values["HR"][0]) and math.isnan(r.values["O2Sat"][1])
    assert math.isnan(r.values["Resp"][0]) and math.isnan(r.values["Lactate"][1])
    assert r.has_missing()


def test_unknown_columns_ignored_and_absent_columns_missing(tmp_path):
    p = write(tmp_path / "a.psv", ["1|80|37.1|1"], header="Extra|HR|Temp|ICULOS")
    r = clinical.read_psv(p)
    assert r.values["HR"].tolist() == [80.0]
    assert np.isnan(r.values["MAP"]).all()


def test_fixture_directory_order(records):
    assert [r.pid for r in records] == [f"p{i:02d}" for i in range(1, 11)]
    assert [r.n_rows for r in records] == [14, 9, 12, 20, 6, 16, 11, 18, 13, 24]


def test_malformed_cell_reports_file_and_line(tmp_path):
    p = write(tmp_path / "bad.psv", ["80|97|120|85|60|16|1.1|1", "82|9x7|118|84|61|17|1.3|2"])
    with pytest.raises(ParseError) as ei:
        clinical.read_psv(p)
    assert ei.value.file == str(p) and ei.value.line == 3


def test_missing_iculos_is_schema_error(tmp_path):
    p = write(tmp_path / "a.psv", ["80|97"], header="HR|O2Sat")
    with pytest.raises(SchemaError):
        clinical.read_psv(p)


@pytest.mark.parametrize("times", [["2", "2"], ["3", "1"], ["0", "1"]])
def test_iculos_must_increase(tmp_path, times):
    rows = [f"80|97|120|85|60|16|1.1|{t}" for t in times]
    with pytest.raises(ParseError):
        clinical.read_psv(write(tmp_path / "a.psv", rows))


def test_psv_round_trip(tmp_path, records):
    for r in records[:3]:
        clinical.write_psv(r, tmp_path / f"{r.pid}.psv")
    back = clinical.ingest_psv(tmp_path)
    for a, b in zip(records[:3], back):
        assert np.array_equal(a.iculos, b.iculos)
        for name in clinical.VARIABLES:
            np.testing.assert_array_equal(a.values[name], b.values[name])


# ---------------------------------------------------------------------------
# imputation


def test_fully_observed_unchanged():
    t = np.arange(1, 6)
    vals = {n: np.linspace(1, 2, 5) + k for k, n in enumerate(clinical.VARIABLES)}
    rec = clinical.PatientRecord("x", t, vals)
    out = clinical.impute(rec)
    for n in clinical.VARIABLES:
        assert np.array_equal(out.values[n], vals[n])


def test_resp_all_missing_excluded(imputed):
    kept, excluded = imputed
    assert [e.pid for e in excluded] == ["p03"]
    assert "Resp" in excluded[0].reason
    assert "p03" not in [r.pid for r in kept]


def test_lactate_never_observed_uses_fallback(imputed):
    kept, _ = imputed
    p07 = next(r for r in kept if r.pid == "p07")
    assert np.all(p07.values["Lactate"] == clinical.DEFAULT_FALLBACK["Lactate"])


def test_no_fallback_excludes(records):
    p07 = next(r for r in records if r.pid == "p07")
    assert isinstance(clinical.impute(p07, fallback={}), clinical.Excluded)


def test_linear_midpoint():
    assert clinical.interpolate_series([1, 3], [2.0, 4.0], [2])[0] == pytest.approx(3.0, abs=1e-15)


def test_constant_fill_outside_observed_range():
    out = clinical.interpolate_series([3, 5, 6, 9, 10], [1.0, 2.0, 0.5, 4.0, 3.0], [1, 2, 11, 14])
    assert out.tolist() == [1.0, 1.0, 3.0, 3.0]


def test_single_observation_is_constant():
    assert clinical.interpolate_series([4], [7.5], [1, 4, 9]).tolist() == [7.5, 7.5, 7.5]


def test_spline_matches_natural_cubic():
    from scipy.interpolate import CubicSpline

    t = np.array([1.0, 2.0, 4.0, 7.0, 8.0])
    y = np.array([1.0, -1.0, 0.5, 2.0, 1.5])
    q = np.linspace(1, 8, 29)
    np.testing.assert_allclose(clinical.interpolate_series(t, y, q), CubicSpline(t, y, bc_type="natural")(q),
                               atol=1e-12)


def test_imputed_fixture_complete_and_knot_exact(records, imputed):
    kept, _ = imputed
    raw = {r.pid: r for r in records}
    for r in kept:
        assert not r.has_missing()
        for n in clinical.VARIABLES:
            obs = ~np.isnan(raw[r.pid].values[n])
            assert np.max(np.abs(r.values[n][obs] - raw[r.pid].values[n][obs]), initial=0.0) <= 1e-9


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12), st.integers(0, 2**31 - 1))
def test_interpolation_exact_at_knots(y, seed):
    g = np.random.default_rng(seed)
    t = np.sort(g.choice(np.arange(1, 60), size=len(y), replace=False)).astype(float)
    out = clinical.interpolate_series(t, y, np.arange(1, 61))
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out[t.astype(int) - 1], y, atol=1e-9)


# ---------------------------------------------------------------------------
# discretization


def test_constant_o2sat_is_degenerate(imputed):
    kept, _ = imputed
    flat = [clinical.PatientRecord(r.pid, r.iculos, {**r.values, "O2Sat": np.full(r.n_rows, 97.0)})
            for r in kept]
    with pytest.raises(DegenerateCut):
        clinical.fit_discretization(flat)


def test_lactate_cut_is_training_quantile(imputed):
    kept, _ = imputed
    spec = clinical.fit_discretization(kept, lactate_quantile=0.9)
    pooled = np.concatenate([r.values["Lactate"] for r in kept])
    assert spec.cuts["Lactate"] == (pytest.approx(np.percentile(pooled, 90), abs=1e-12),)
    assert spec.cuts["DBP"][0] == pytest.approx(np.median(np.concatenate([r.values["DBP"] for r in kept])))


def test_clinical_thresholds_default_and_override(imputed):
    kept, _ = imputed
    spec = clinical.fit_discretization(kept)
    assert spec.cuts["MAP"] == (65.0, 100.0) and spec.cuts["HR"] == (60.0, 100.0)
    assert spec.cuts["SBP"] == (90.0, 140.0)
    spec2 = clinical.fit_discretization(kept, thresholds={"MAP": (70.0, 105.0)})
    assert spec2.cuts["MAP"] == (70.0, 105.0)


def test_level_codes():
    spec = clinical.DiscretizationSpec({"MAP": (65, 100), "HR": (60, 100), "SBP": (90, 140), "DBP": 60,
                                        "O2Sat": 95, "Resp": 18, "Lactate": 2})
    assert spec.code("MAP", [50, 65, 80, 100, 120]).tolist() == [0, 1, 1, 2, 2]
    assert spec.code("Lactate", [1.9, 2.0]).tolist() == [0, 1]


def test_spec_validation():
    base = {"MAP": (65, 100), "HR": (60, 100), "SBP": (90, 140), "DBP": 60, "O2Sat": 95, "Resp": 18, "Lactate": 2}
    with pytest.raises(DomainError):
        clinical.DiscretizationSpec({**base, "MAP": (100, 65)})
    with pytest.raises(SchemaError):
        clinical.DiscretizationSpec({**base, "DBP": (50, 60)})
    with pytest.raises(SchemaError):
        clinical.DiscretizationSpec({k: v for k, v in base.items() if k != "HR"})


def test_fit_on_train_only(imputed):
    kept, _ = imputed
    train, test = kept[:5], kept[5:]
    spec = clinical.fit_discretization(train)
    before = spec.to_dict()
    for r in test:
        clinical.discretize(r, spec)
    assert spec.to_dict() == before
    # shifting the test rows does not move the cuts either
    shifted = [clinical.PatientRecord(r.pid, r.iculos, {k: v + 100 for k, v in r.values.items()}) for r in test]
    assert clinical.fit_discretization(train + []).to_dict() == before
    assert clinical.fit_discretization(train).to_dict() == clinical.DiscretizationSpec.from_dict(before).to_dict()
    assert clinical.fit_discretization(shifted).to_dict() != before


def test_state_encoding_round_trip():
    idx = np.arange(clinical.N_STATES)
    assert clinical.N_STATES == 216
    assert np.array_equal(clinical.encode_state(clinical.decode_state(idx)), idx)
    assert clinical.encode_state([[2, 0, 0, 0, 0, 0]]).tolist() == [144]


def test_discretize_requires_imputation(records, imputed):
    spec = clinical.fit_discretization(imputed[0])
    with pytest.raises(DomainError):
        clinical.discretize(records[0], spec)


# ---------------------------------------------------------------------------
# task construction


def test_latent_only_expert():
    recs = random_discrete_records(4, 30, seed=1)
    expert = clinical.ExpertParams(np.zeros(3), np.zeros((3, 6)), 10.0 * np.array([[0.0], [-1.0], [1.0]]))
    batch = clinical.build_task(recs, expert=expert, seed=3)
    for ep in batch.episodes:
        # U=0 ties actions 0 and 1 at logit 0 (lowest wins); U=1 picks action 2
        assert np.array_equal(ep.actions, np.where(ep.latents == 1, 2, 0))


def test_zero_proxy_parameters_give_uniform_proxies():
    recs = random_discrete_records(20, 500, seed=2)
    zero = clinical.ProxyChannel(np.zeros(3), np.zeros((3, 1)))
    batch = clinical.build_task(recs, channels=(zero, zero), seed=0)
    w = np.concatenate([ep.proxies for ep in batch.episodes])
    freq = np.bincount(w, minlength=3) / len(w)
    # 4.5 binomial standard errors
    assert np.all(np.abs(freq - 1 / 3) < 4.5 * math.sqrt(2 / 9 / len(w)))


def test_expert_table_matches_loop():
    ex = clinical.ExpertParams()
    tab = ex.table()
    for idx in (0, 37, 100, 215):
        codes = clinical.decode_state(idx)
        for u in (0, 1):
            logits = ex.gamma_0 + ex.Gamma_S @ codes + ex.Gamma_U[:, 0] * u
            assert tab[idx, u] == int(np.argmax(logits))


def test_build_task_alignment():
    recs = random_discrete_records(3, 8, seed=4)
    ex = clinical.ExpertParams()
    tab = ex.table()
    batch = clinical.build_task(recs, expert=ex, seed=0)
    for rec, ep in zip(recs, batch.episodes):
        assert ep.T == 7
        assert np.array_equal(ep.states, rec.states)
        assert np.array_equal(ep.latents, rec.latent[:-1])
        assert np.array_equal(ep.actions, [tab[rec.states[t], rec.latent[t - 1]] for t in range(1, 8)])
    assert batch.cards.k_s == 216 and batch.cards.k_w == 3 and batch.cards.k_a == 3


def test_concat_proxy_mode():
    recs = random_discrete_records(3, 10, seed=5)
    first = clinical.build_task(recs, seed=0, proxy_mode="first")
    both = clinical.build_task(recs, seed=0, proxy_mode="concat")
    assert both.cards.k_w == 9
    for a, b in zip(first.episodes, both.episodes):
        assert np.array_equal(b.proxies // 3, a.proxies)


def test_build_task_shape_errors():
    recs = random_discrete_records(1, 5, seed=0)
    with pytest.raises(ShapeError):
        clinical.ExpertParams(Gamma_S=np.zeros((3, 5)))
    with pytest.raises(ShapeError):
        clinical.ProxyChannel(np.zeros(2), np.zeros((3, 1)))
    with pytest.raises(ShapeError):
        clinical.build_task(recs, channels=clinical.default_channels()[:1])


def test_single_row_patients_skipped():
    recs = random_discrete_records(2, 1, seed=0) + random_discrete_records(1, 4, seed=1)
    batch = clinical.build_task(recs)
    assert batch.n == 1 and batch.metadata["skipped"] == ["r000", "r001"]
    with pytest.raises(EmptySelection):
        clinical.build_task(random_discrete_records(2, 1, seed=0))


def test_golden_batch(imputed, tmp_path):
    batch = golden_batch(imputed)
    out = tmp_path / "b.ndjson"
    write_ndjson(batch, out)
    assert out.read_bytes() == GOLDEN_BATCH.read_bytes()
    assert read_ndjson(GOLDEN_BATCH) == batch
    assert batch.n == 9 and pool_tuples(batch).N == 122


# ---------------------------------------------------------------------------
# measurement shift


@pytest.fixture(scope="module")
def small_batch():
    return clinical.build_task(random_discrete_records(5, 12, seed=6), seed=1)


def test_shift_all_from_zero(small_batch):
    out = clinical.apply_measurement_shift(small_batch, 0)
    f1 = clinical.flip_channel(clinical.default_channels()[0]).probs()
    for i, (a, b) in enumerate(zip(small_batch.episodes, out.episodes)):
        u = rng.stream(1, i, rng.CH_AUX).random((2, b.T))[0]
        want = (np.cumsum(f1[a.latents], axis=1)[:, :-1] <= u[:, None]).sum(axis=1)
        assert np.array_equal(b.proxies, want)
        assert np.array_equal(a.states, b.states) and np.array_equal(a.actions, b.actions)
        assert np.array_equal(a.latents, b.latents)
    assert out.metadata["shift"] == "measurement" and out.metadata["t0"] == 0


def test_shift_at_pooled_size_unchanged(small_batch):
    N = pool_tuples(small_batch).N
    out = clinical.apply_measurement_shift(small_batch, N)
    assert np.array_equal(pool_tuples(out).w, pool_tuples(small_batch).w)
    assert "shift_warning" not in out.metadata


def test_shift_beyond_pooled_size_warns(small_batch):
    N = pool_tuples(small_batch).N
    out = clinical.apply_measurement_shift(small_batch, N + 1)
    assert np.array_equal(pool_tuples(out).w, pool_tuples(small_batch).w)
    assert "shift_warning" in out.metadata


@pytest.mark.parametrize("t0", [0, 7, 11, 30, 54])
def test_shift_touches_only_tail(small_batch, t0):
    before = pool_tuples(small_batch)
    after = pool_tuples(clinical.apply_measurement_shift(small_batch, t0))
    assert np.array_equal(before.w[:t0], after.w[:t0])
    assert np.array_equal(before.s, after.s) and np.array_equal(before.a, after.a)
    assert np.array_equal(before.z, after.z)


def test_shift_validation(small_batch):
    with pytest.raises(DomainError):
        clinical.apply_measurement_shift(small_batch, -1)
    with pytest.raises(DomainError):
        clinical.apply_measurement_shift(small_batch.hide_latents(), 0)


def test_flipped_channel_softmax():
    ch = clinical.default_channels()[0]
    f = clinical.flip_channel(ch).probs()
    for u in (0, 1):
        x = -ch.omega_0 - ch.Omega_U[:, 0] * u
        np.testing.assert_allclose(f[u], np.exp(x) / np.exp(x).sum(), atol=1e-15)


def test_sign_flip_involution():
    for ch in clinical.default_channels():
        twice = clinical.flip_channel(clinical.flip_channel(ch))
        assert np.array_equal(twice.omega_0, ch.omega_0) and np.array_equal(twice.Omega_U, ch.Omega_U)
        np.testing.assert_array_equal(twice.probs(), ch.probs())


def test_double_flip_regenerates_original_law(small_batch):
    # shifting with the flipped channels as base regenerates from the original mechanism
    base = clinical.default_channels()
    flipped = tuple(clinical.flip_channel(c) for c in base)
    out = clinical.apply_measurement_shift(small_batch, 0, channels=flipped)
    p1 = base[0].probs()
    for i, (a, b) in enumerate(zip(small_batch.episodes, out.episodes)):
        u = rng.stream(1, i, rng.CH_AUX).random((2, b.T))[0]
        want = (np.cumsum(p1[a.latents], axis=1)[:, :-1] <= u[:, None]).sum(axis=1)
        assert np.array_equal(b.proxies, want)


def test_flip_drives_agreement_below_one_third():
    # W=1 dominant under U=1 before the flip; after it P(W=U) falls well below 1/3
    ch = clinical.ProxyChannel(np.zeros(3), 1.5 * np.array([[-1.0], [1.0], [0.0]]))
    recs = random_discrete_records(40, 501, seed=7, p_u=0.5)
    batch = clinical.build_task(recs, channels=(ch, ch), seed=2)
    shifted = clinical.apply_measurement_shift(batch, 0)
    u = np.concatenate([ep.latents for ep in shifted.episodes])
    w = np.concatenate([ep.proxies for ep in shifted.episodes])
    f = clinical.flip_channel(ch).probs()
    analytic = np.mean(f[u, u])
    # P(W=1 | U=1) after the flip is exp(-1.5) / (exp(-1.5) + exp(1.5) + 1)
    assert f[1, 1] == pytest.approx(math.exp(-1.5) / (math.exp(-1.5) + math.exp(1.5) + 1), abs=1e-15)
    assert analytic < 1 / 3
    assert abs(np.mean(w == u) - analytic) <= 0.02
    w0 = np.concatenate([ep.proxies for ep in batch.episodes])
    assert np.mean(w0 == u) > 1 / 3 + 0.1


# ---------------------------------------------------------------------------
# population shift


def test_select_all(records, imputed):
    kept, _ = imputed
    got = clinical.select_shifted_population(kept, q=0.0, h=0)
    assert [r.pid for r in got] == [r.pid for r in kept]
    # before imputation a patient without any lactate reading has no peak and never qualifies
    raw = clinical.select_shifted_population(records, q=0.0, h=0)
    assert [r.pid for r in raw] == [r.pid for r in records if r.pid != "p07"]


def test_select_empty(records):
    with pytest.raises(EmptySelection):
        clinical.select_shifted_population(records, q=0.0, h=max(r.stay for r in records) + 1)


def test_select_fixture(records):
    # pooled lactate (38 values) has 0.9-quantile 2.53; peaks reaching it: p05 (2.6, 6 h) and p10 (3.0, 24 h)
    got = clinical.select_shifted_population(records)
    assert [r.pid for r in got] == ["p10"]
    assert [r.pid for r in clinical.select_shifted_population(records, h=6)] == ["p05", "p10"]


def test_select_validation(records):
    with pytest.raises(DomainError):
        clinical.select_shifted_population(records, q=1.0)
    with pytest.raises(DomainError):
        clinical.select_shifted_population(records, h=-1)


@given(st.floats(0, 0.99), st.floats(0, 0.99), st.floats(0, 30), st.floats(0, 30))
def test_selection_monotone(q1, q2, h1, h2):
    recs = clinical.ingest_psv(PSV)
    q_lo, q_hi = sorted((q1, q2))
    h_lo, h_hi = sorted((h1, h2))

    def ids(q, h):
        try:
            return {r.pid for r in clinical.select_shifted_population(recs, q, h)}
        except EmptySelection:
            return set()

    assert ids(q_hi, h_lo) <= ids(q_lo, h_lo)
    assert ids(q_lo, h_hi) <= ids(q_lo, h_lo)
