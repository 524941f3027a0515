"""Test corruption plans, materialization and repeated evaluation."""
import json

import numpy as np
import pytest
from scipy import stats

from reid_robustness.corruptions import CorruptionSpec, CorruptionType, apply_corruption
from reid_robustness.datafiles import DatasetManifest, load_manifest, validate_report
from reid_robustness.errors import (
    CountMismatchError,
    DataError,
    MaterializeError,
    MissingEmbeddingError,
    UsageError,
)
from reid_robustness.imaging import read_image
from reid_robustness.protocol import (
    BenchmarkRunner,
    CorruptionPlan,
    CrossModalityMode,
    EvalEmbeddings,
    EvalOptions,
    EvalSetting,
    MetricStats,
    SyntheticEmbedder,
    build_plan,
    corrupted_sides,
    gallery_draws,
    load_embedding_tree,
    load_plan,
    materialize,
    render_report,
    report_from_distances,
    report_to_csv,
    resolve_roles,
    run_eval,
    run_sweep,
    sample_plan,
    sweep_plan,
    synthesize_tree,
    synthetic_embed,
)
from reid_robustness.rng import derive_seed

from tests.common import make_image, regdb_records, single_records, sysu_records, write_corpus


def _onehot(records, dim=16):
    return np.eye(dim)[[r.person_id % dim for r in records]]


def _perfect(roles):
    return EvalEmbeddings(_onehot(roles.query), _onehot(roles.gallery))


def test_golden_plan_entries(fixtures_dir):
    golden = json.loads((fixtures_dir / "plan_golden.json").read_text())
    for case in golden["plan_entries"]:
        plan = sample_plan([case["image_id"]], case["master_seed"], case["repeat_index"])
        spec = plan.entries[0].spec
        assert spec.ctype.value == case["type"]
        assert spec.severity == case["severity"]
        assert spec.seed == case["seed"]


def test_golden_plan_for_first_four_images(fixtures_dir):
    golden = json.loads((fixtures_dir / "plan_golden.json").read_text())
    expected = {
        case["image_id"]: (case["type"], case["severity"], case["seed"])
        for case in golden["plan_entries"]
        if (case["master_seed"], case["repeat_index"]) == (0, 0)
    }
    assert sorted(expected) == [0, 1, 2, 3]
    plan = sample_plan(range(4), 0, 0)
    assert [e.image_id for e in plan.entries] == [0, 1, 2, 3]
    for entry in plan.entries:
        spec = entry.spec
        assert (spec.ctype.value, spec.severity, spec.seed) == expected[entry.image_id]


def test_plan_cells_are_uniform():
    plan = sample_plan(range(20000), 2024, 0)
    counts = np.zeros(100, dtype=np.int64)
    for entry in plan.entries:
        counts[entry.spec.ctype.position * 5 + entry.spec.severity - 1] += 1
    assert counts.sum() == 20000
    assert stats.chisquare(counts).pvalue > 1e-3


def test_plan_entries_do_not_depend_on_other_images():
    full = sample_plan(range(100), 5, 2).specs()
    subset = sample_plan([50, 7], 5, 2).specs()
    assert subset == {50: full[50], 7: full[7]}


def test_repeats_change_the_plan():
    first = sample_plan(range(50), 5, 0).specs()
    second = sample_plan(range(50), 5, 1).specs()
    assert first != second
    assert sample_plan(range(50), 5, 0).specs() == first


def test_sample_plan_rejects_bad_ids():
    with pytest.raises(UsageError):
        sample_plan([], 0, 0)
    with pytest.raises(UsageError):
        sample_plan([1, 1], 0, 0)
    with pytest.raises(UsageError):
        sample_plan([1], 0, 0, setting="train")


def test_sweep_plan():
    plan = sweep_plan(range(10), "fog", 3, 1, 0)
    assert {(e.spec.ctype, e.spec.severity) for e in plan.entries} == {(CorruptionType.FOG, 3)}
    assert len({e.spec.seed for e in plan.entries}) == 10
    assert str(plan.subdir) == "sweep/fog-3"


def test_plan_survives_dict_round_trip():
    for plan in (sample_plan(range(5), 3, 1, setting="query"), sweep_plan([4, 2], "jpeg", 5, 3, 0)):
        assert CorruptionPlan.from_dict(json.loads(json.dumps(plan.as_dict()))) == plan


def test_settings():
    assert EvalSetting.parse("clean").sides == frozenset()
    assert EvalSetting.parse("both").sides == {"query", "gallery"}
    with pytest.raises(UsageError):
        EvalSetting.parse("train")
    assert CrossModalityMode("regdb", "B").name == "thermal-to-visible"
    with pytest.raises(UsageError):
        CrossModalityMode("market1501")


def test_build_plan_single_dataset():
    manifest = DatasetManifest("custom", tuple(single_records(4)))
    roles = resolve_roles(manifest)
    gallery_ids = {r.image_id for r in roles.gallery}
    query_ids = {r.image_id for r in roles.query}
    assert set(build_plan(roles, "gallery", 0, 0).image_ids) == gallery_ids
    assert set(build_plan(roles, "query", 0, 0).image_ids) == query_ids
    assert set(build_plan(roles, "both", 0, 0).image_ids) == gallery_ids | query_ids
    assert len(build_plan(roles, "clean", 0, 0)) == 0
    fixed = build_plan(roles, "query", 0, 0, fixed=(CorruptionType.SNOW, 2))
    assert set(fixed.image_ids) == gallery_ids | query_ids
    assert fixed.fixed == (CorruptionType.SNOW, 2)


def test_regdb_corrupts_only_visible_images():
    manifest = DatasetManifest("regdb", tuple(regdb_records(3)))
    rgb = {0, 1, 4, 5, 8, 9}
    visible_query = resolve_roles(manifest, "A")
    assert visible_query.mode == "A"
    assert {r.modality for r in visible_query.query} == {"rgb"}
    assert len(build_plan(visible_query, "gallery", 0, 0)) == 0
    assert set(build_plan(visible_query, "both", 0, 0, cross_modality="all-rgb").image_ids) == rgb
    thermal_query = resolve_roles(manifest, "B")
    assert set(build_plan(thermal_query, "gallery", 0, 0).image_ids) == rgb
    assert corrupted_sides(thermal_query, "both") == {"gallery"}
    with pytest.raises(UsageError):
        build_plan(thermal_query, "both", 0, 0, cross_modality="everything")


def test_sysu_roles():
    manifest = DatasetManifest("sysu-mm01", tuple(sysu_records(4)))
    all_search = resolve_roles(manifest)
    assert all_search.mode == "A"
    assert len(all_search.query) == 8
    assert len(all_search.gallery) == 32
    indoor = resolve_roles(manifest, "B")
    assert {r.camera_id for r in indoor.gallery} == {1, 2}
    assert len(indoor.gallery) == 16


def test_resolve_roles_edge_cases():
    manifest = DatasetManifest("custom", tuple(single_records(2)))
    assert resolve_roles(manifest, "B").mode is None
    only_query = DatasetManifest("custom", tuple(single_records(2, gallery_per_id=0)))
    with pytest.raises(DataError):
        resolve_roles(only_query)


def test_materialize(manifest, tmp_path):
    roles = resolve_roles(manifest)
    plan = build_plan(roles, "gallery", 5, 0)
    final = materialize(plan, manifest, tmp_path / "out", workers=2)
    assert final == tmp_path / "out" / "gallery" / "0"
    specs = plan.specs()
    for record in roles.query:
        assert np.array_equal(read_image(final / f"{record.image_id}.png"), make_image(record.image_id))
    for record in roles.gallery:
        expected = apply_corruption(make_image(record.image_id), specs[record.image_id])
        assert np.array_equal(read_image(final / f"{record.image_id}.png"), expected)
    assert load_plan(final / "plan.json") == plan
    assert [p.name for p in final.parent.iterdir()] == ["0"]
    # a second run replaces the directory
    assert materialize(plan, manifest, tmp_path / "out") == final


def test_materialize_keeps_partial_output_on_failure(tmp_path):
    path = write_corpus(tmp_path / "corpus", single_records(2), broken=[2])
    manifest = load_manifest(path)
    plan = build_plan(resolve_roles(manifest), "both", 0, 0)
    with pytest.raises(MaterializeError) as err:
        materialize(plan, manifest, tmp_path / "out")
    assert [image_id for image_id, _ in err.value.failures] == [2]
    assert (tmp_path / "out" / "both" / "0").exists() is False
    marker = (tmp_path / "out" / "both").glob(".*/INCOMPLETE")
    assert next(marker).read_text().startswith("2\t")


def test_materialize_rejects_unknown_images(manifest, tmp_path):
    with pytest.raises(DataError):
        materialize(sample_plan([999], 0, 0), manifest, tmp_path / "out")


async def test_runner_keeps_order_and_errors():
    def square(x):
        if x == 3:
            raise ValueError("three")
        return x * x

    runner = BenchmarkRunner(4)
    results = await runner.async_map(square, range(6))
    assert results[:3] == [0, 1, 4]
    assert isinstance(results[3], ValueError)
    assert results[4:] == [16, 25]
    with pytest.raises(ValueError):
        await runner.async_map_strict(square, range(6))
    with pytest.raises(UsageError):
        BenchmarkRunner(0)


def test_metric_stats():
    flat = MetricStats.from_raw([0.5, 0.5])
    assert (flat.mean, flat.std) == (0.5, 0.0)
    spread = MetricStats.from_raw([0.0, 1.0])
    assert (spread.mean, spread.std) == (0.5, 0.5)
    assert spread.format() == "50.00 (50.00)"
    with pytest.raises(UsageError):
        MetricStats.from_raw([])


def test_run_eval_rows():
    manifest = DatasetManifest("custom", tuple(single_records(5)))
    roles = resolve_roles(manifest)
    clean_q, clean_g = _onehot(roles.query), _onehot(roles.gallery)
    shifted = np.eye(16)[[(r.person_id + 1) % 5 for r in roles.query]]
    embeddings = EvalEmbeddings(
        clean_q,
        clean_g,
        {("both", 0): clean_q, ("both", 1): shifted},
        {("both", 0): clean_g, ("both", 1): clean_g},
    )
    report = run_eval(manifest, embeddings, ["clean", "both"], 2, 0, options=EvalOptions(workers=2))
    clean = report.row("clean")
    assert clean.metrics["mAP"].raw == (1.0, 1.0)
    assert clean.metrics["mINP"].mean == 1.0
    both = report.row("both")
    assert both.metrics["rank1"].raw == (1.0, 0.0)
    assert both.metrics["rank1"].std == 0.5
    assert both.metrics["mAP"].raw[1] < 1.0
    assert both.n_valid == (5, 5)
    assert list(both.metrics) == ["mAP", "mINP", "rank1", "rank5", "rank10"]
    assert report.seeds == {"master_seed": 0, "repeat_indices": [0, 1], "gallery_draw_seeds": []}
    assert report.mode is None
    validate_report(report.as_dict())


def test_run_eval_errors():
    manifest = DatasetManifest("custom", tuple(single_records(3)))
    roles = resolve_roles(manifest)
    perfect = _perfect(roles)
    with pytest.raises(MissingEmbeddingError):
        run_eval(manifest, perfect, "query", 1, 0)
    short = EvalEmbeddings(perfect.clean_query[:-1], perfect.clean_gallery)
    with pytest.raises(CountMismatchError):
        run_eval(manifest, short, "clean", 1, 0)
    with pytest.raises(UsageError):
        run_eval(manifest, perfect, "clean", 0, 0)
    with pytest.raises(UsageError):
        run_eval(manifest, [perfect, perfect], "clean", 1, 0)


def test_workers_do_not_change_reports():
    manifest = DatasetManifest("custom", tuple(single_records(12, 2, 6)))
    roles = resolve_roles(manifest)
    rng = np.random.default_rng(11)
    corrupted = {("query", r): rng.normal(size=(len(roles.query), 8)) for r in range(5)}
    embeddings = EvalEmbeddings(
        rng.normal(size=(len(roles.query), 8)), rng.normal(size=(len(roles.gallery), 8)), corrupted
    )
    reports = [
        run_eval(manifest, embeddings, ["clean", "query"], 5, 9, options=EvalOptions(workers=w))
        for w in (1, 4, 16)
    ]
    first = [row.as_dict() for row in reports[0].rows]
    for report in reports[1:]:
        assert [row.as_dict() for row in report.rows] == first
        assert report.seeds == reports[0].seeds


def test_query_and_gallery_corruption_hurt_different_metrics():
    """Corrupted queries cost Rank-1; a corrupted gallery costs mINP, seed by seed."""
    manifest = DatasetManifest("custom", tuple(single_records(50, 2, 8)))
    roles = resolve_roles(manifest)
    repeats = 3

    def embed(records, distortion, seed):
        return np.stack(
            [synthetic_embed(r, distortion, 64, seed, sigma0=0.02, sigma1=0.5) for r in records]
        )

    def drop(report, setting, metric):
        return report.row("clean").metrics[metric].mean - report.row(setting).metrics[metric].mean

    agreeing = 0
    for master in range(10):
        embeddings = EvalEmbeddings(
            embed(roles.query, 0.0, master),
            embed(roles.gallery, 0.0, master),
            {("query", r): embed(roles.query, 0.35, derive_seed(master, r)) for r in range(repeats)},
            {("gallery", r): embed(roles.gallery, 0.35, derive_seed(master, r)) for r in range(repeats)},
        )
        report = run_eval(manifest, embeddings, ["clean", "query", "gallery"], repeats, master)

        assert report.row("clean").metrics["rank1"].mean > 0.99
        hurts_rank1 = drop(report, "query", "rank1") > drop(report, "gallery", "rank1")
        hurts_minp = drop(report, "gallery", "mINP") > drop(report, "query", "mINP")
        if hurts_rank1 and hurts_minp:
            agreeing += 1
    assert agreeing >= 8


def test_sweep_degrades_with_severity():
    manifest = DatasetManifest("custom", tuple(single_records(50, 2, 8)))
    roles = resolve_roles(manifest)
    embedder = SyntheticEmbedder(dim=64, seed=4, sigma0=0.08, sigma1=0.6)
    images = {r.image_id: make_image(r.image_id) for r in manifest.records}
    ids = sorted(images)
    repeats = 3
    clean_q = embedder.embed_images(roles.query, images)
    clean_g = embedder.embed_images(roles.gallery, images)
    cells = {(None, 0): EvalEmbeddings(clean_q, clean_g)}
    for severity in range(1, 6):
        table_q, table_g = {}, {}
        for r in range(repeats):
            specs = sweep_plan(ids, CorruptionType.GAUSSIAN_NOISE, severity, 7, r).specs()
            corrupted = {i: apply_corruption(images[i], spec) for i, spec in specs.items()}
            table_q[("both", r)] = embedder.embed_images(roles.query, images, corrupted)
            table_g[("both", r)] = embedder.embed_images(roles.gallery, images, corrupted)
        cells[(CorruptionType.GAUSSIAN_NOISE, severity)] = EvalEmbeddings(
            clean_q, clean_g, table_q, table_g
        )
    table = run_sweep(manifest, cells, repeats, 7)
    assert [row.severity for row in table.rows] == [0, 1, 2, 3, 4, 5]
    assert table.rows[0].label == "clean"
    for metric in ("mAP", "mINP"):
        means = [row.metrics[metric].mean for row in table.rows]
        assert all(a > b for a, b in zip(means, means[1:])), (metric, means)
    assert table.row("gaussian-noise", 3).severity == 3
    assert table.to_csv().splitlines()[0].startswith("type,severity,mAP,mAP_std,mINP")
    assert table.render().splitlines()[1].startswith("clean")


def test_sweep_cells_are_validated():
    manifest = DatasetManifest("custom", tuple(single_records(3)))
    perfect = _perfect(resolve_roles(manifest))
    with pytest.raises(UsageError):
        run_sweep(manifest, {(None, 2): perfect}, 1, 0)
    with pytest.raises(UsageError):
        run_sweep(manifest, {("fog", 6): perfect}, 1, 0)


def test_gallery_draws_pick_one_image_per_identity_and_camera():
    manifest = DatasetManifest("sysu-mm01", tuple(sysu_records(4)))
    gallery = resolve_roles(manifest).gallery
    draws = gallery_draws(gallery, 1, 0, 3)
    assert len(draws) == 3
    for picks in draws:
        chosen = {(gallery[i].person_id, gallery[i].camera_id) for i in picks}
        assert len(picks) == len(chosen) == 16
    assert all(np.array_equal(a, b) for a, b in zip(draws, gallery_draws(gallery, 1, 0, 3)))


def test_sysu_eval_averages_over_draws():
    manifest = DatasetManifest("sysu-mm01", tuple(sysu_records(4)))
    roles = resolve_roles(manifest)
    report = run_eval(manifest, _perfect(roles), "clean", 2, 6, options=EvalOptions(sysu_draws=3))
    row = report.row("clean")
    assert row.metrics["mAP"].mean == 1.0
    assert row.n_valid == (24, 24)
    assert report.seeds["gallery_draw_seeds"] == [
        [derive_seed(6, r, d) for d in range(3)] for r in range(2)
    ]
    assert report.protocol == "sysu"


def test_regdb_eval():
    manifest = DatasetManifest("regdb", tuple(regdb_records(4)))
    for mode in ("A", "B"):
        roles = resolve_roles(manifest, mode)
        report = run_eval(manifest, _perfect(roles), "clean", 1, 0, mode)
        assert report.mode == mode
        assert report.row("clean").metrics["rank1"].mean == 1.0


def test_report_from_distances_and_rendering():
    manifest = DatasetManifest("custom", tuple(single_records(4)))
    roles = resolve_roles(manifest)
    same = np.array([[q.person_id == g.person_id for g in roles.gallery] for q in roles.query])
    report = report_from_distances(manifest, 1.0 - same, "both").as_dict()
    assert report["rows"][0]["metrics"]["mAP"] == {"mean": 1.0, "std": 0.0, "raw": [1.0]}
    text = render_report(report)
    assert text.startswith("custom (single), 1 repeat(s), seed 0\n")
    assert "100.00 (0.00)" in text
    lines = report_to_csv(report).splitlines()
    assert lines[0] == "tap,setting,mAP,mAP_std,mINP,mINP_std,rank1,rank1_std,rank5,rank5_std,rank10,rank10_std"
    assert lines[1].startswith("unspecified,both,1.0,0.0")
    with pytest.raises(CountMismatchError):
        report_from_distances(manifest, np.zeros((2, 2)))


def test_end_to_end_on_disk(manifest, tmp_path):
    roles = resolve_roles(manifest)
    images, trees = tmp_path / "images", tmp_path / "emb"
    for r in range(2):
        materialize(build_plan(roles, "both", 3, r), manifest, images)
        materialize(build_plan(roles, "both", 3, r, fixed=(CorruptionType.FOG, 2)), manifest, images)
    written = synthesize_tree(manifest, roles, images, trees, SyntheticEmbedder(dim=16, seed=3))
    assert len(written) == 2 * (1 + 2 + 2)
    assert (trees / "clean" / "query.cile").is_file()
    assert (trees / "sweep" / "fog-2" / "1" / "gallery.cile").is_file()

    embeddings = load_embedding_tree(trees, roles, ["both"], 2)
    report = run_eval(manifest, embeddings, ["clean", "both"], 2, 3)
    validate_report(report.as_dict())
    assert report.row("clean").metrics["mAP"].mean == pytest.approx(1.0)

    fog = load_embedding_tree(trees, roles, ["both"], 2, fixed=(CorruptionType.FOG, 2))
    table = run_sweep(manifest, {(None, 0): embeddings, ("fog", 2): fog}, 2, 3)
    assert [row.label for row in table.rows] == ["clean", "fog"]
    with pytest.raises(DataError):
        load_embedding_tree(trees, roles, ["query"], 3)


def test_synthetic_embed():
    record = single_records(1)[0]
    vector = synthetic_embed(record, 0.0, 8, 1)
    assert np.linalg.norm(vector) == pytest.approx(1.0)
    assert np.argmax(vector) == record.person_id
    assert np.array_equal(vector, synthetic_embed(record, 0.0, 8, 1))
    with pytest.raises(UsageError):
        synthetic_embed(record, 1.5)
    embedder = SyntheticEmbedder.from_config(
        {"dim": 8, "sigma0": 0.02, "sigma1": 1.0, "distortion_gain": 2.0}, seed=1
    )
    image = make_image(0)
    assert embedder.distortion(image, image) == 0.0
    assert embedder.distortion(image, np.zeros_like(image)) == 1.0
    assert isinstance(CorruptionSpec("fog", 1).ctype, CorruptionType)
