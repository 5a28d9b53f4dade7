import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtmd.ablation import AblationReport, run_ablation, variant_config
from mtmd.cli import main
from mtmd.config import DataConfig, TrainConfig, load_config, parse_config_text, render_config
from mtmd.errors import ConfigurationError, DataError
from mtmd.metrics import compare_reports, evaluate, improvement_pct, log_mae
from mtmd.schema import ALL_DOMAINS, TASKS, AdProduct, TaskId
from mtmd.towers import MtmdModel

from conftest import tiny_model_config

TINY_CONFIG = """\
# narrow model so the command line tests stay fast
[train]
batch_size = 16
steps = 3

[model]
deep_dims = 6,5
shallow_dims = 4,3
gate_dims = 4
dcn_rank = 2
task_dims = CTR:4,GCTR:3,OCTR:3  # inline comment
"""


def test_log_mae_examples():
    assert log_mae([0.2, 0.7], [0.2, 0.7]) == 0.0
    assert math.isclose(log_mae([0.5], [0.25]), math.log(2), rel_tol=1e-15)
    assert math.isclose(log_mae([0.5], [0.25]), 0.693147, abs_tol=5e-7)
    with pytest.raises(DataError):
        log_mae([], [])


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.tuples(st.floats(1e-3, 0.3), st.floats(1e-3, 0.3)), min_size=1, max_size=20),
    st.floats(0.1, 3.0),
)
def test_log_mae_scale_invariant(pairs, c):
    p, t = np.array(pairs).T
    assert math.isclose(log_mae(p * c, t * c), log_mae(p, t), rel_tol=1e-9, abs_tol=1e-12)


def test_improvement_pct_examples():
    assert math.isclose(improvement_pct(0.5, 0.4), 20.0, rel_tol=1e-12)
    assert improvement_pct(0.3, 0.3) == 0.0
    assert improvement_pct(0.3, 0.4) < 0
    with pytest.raises(DataError):
        improvement_pct(0.0, 0.1)


def test_compare_grid_shape_and_self_comparison(schema, small_data):
    model = MtmdModel(schema, tiny_model_config(), seed=4)
    report = evaluate(model, small_data, True)
    table = compare_reports(report, report)
    assert len(table.cells) == 18
    assert table.filled() == 15
    na = {k for k, v in table.cells.items() if v is None}
    assert na == {(d, TaskId.OCTR) for d in ALL_DOMAINS if d.product == AdProduct.Shopping}
    assert all(v == 0.0 for v in table.cells.values() if v is not None)
    assert len(table.records()) == 18


def test_inference_rows_are_independent(schema, small_data):
    from mtmd.metrics import predict

    model = MtmdModel(schema, tiny_model_config(), seed=4)
    a = predict(model, small_data, True)
    b = predict(model, small_data, True, chunk=7)
    assert np.array_equal(np.isnan(a), np.isnan(b))
    assert np.allclose(np.nan_to_num(a), np.nan_to_num(b), rtol=1e-12, atol=0)


def test_ablation_full_is_zero(schema, small_data):
    cfg = TrainConfig(batch_size=16, steps=2, model=tiny_model_config())
    rep = run_ablation(["no_dcn"], cfg, small_data, small_data, schema, seeds=[0, 1])
    assert rep.variants == ["full", "no_dcn"]
    for s in (0, 1):
        assert rep.delta("full", s) == 0.0
        for t in TASKS:
            assert rep.delta("full", s, t) == 0.0
    assert rep.median_delta("full") == 0.0
    assert any(line.startswith("kind=ablation_median variant=no_dcn") for line in rep.records())


def test_ablation_identical_configs_share_a_run(schema, small_data):
    cfg = TrainConfig(batch_size=16, steps=1, model=tiny_model_config(task_dims={"CTR": 64, "GCTR": 64, "OCTR": 64}))
    rep = run_ablation(["emb_dim_64"], cfg, small_data, small_data, schema, seeds=[0])
    assert rep.reports[("emb_dim_64", 0)] is rep.reports[("full", 0)]


def test_unknown_variant_and_empty_seeds(schema, small_data):
    with pytest.raises(ConfigurationError):
        variant_config(TrainConfig(), "no_such_variant")
    with pytest.raises(ConfigurationError):
        run_ablation(["no_dcn"], TrainConfig(), small_data, small_data, schema, seeds=[])
    assert isinstance(AblationReport((0,)), AblationReport)


# --- config -----------------------------------------------------------------


def test_config_round_trip():
    train, data = parse_config_text(TINY_CONFIG)
    assert train.model.task_dims == {"CTR": 4, "GCTR": 3, "OCTR": 3}
    assert train.batch_size == 16
    text = render_config(train, data)
    again, data2 = parse_config_text(text)
    assert again == train and data2 == data
    assert render_config(again, data2) == text


def test_unknown_config_key_names_the_key():
    with pytest.raises(ConfigurationError, match="dcn_rnk"):
        parse_config_text("[model]\ndcn_rnk = 4\n")
    with pytest.raises(ConfigurationError):
        parse_config_text("[nowhere]\nx = 1\n")
    with pytest.raises(ConfigurationError):
        parse_config_text("[train]\nsteps = many\n")


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigurationError):
        load_config(tmp_path / "absent.cfg")
    assert DataConfig().alpha == 0.6


# --- command line ---------------------------------------------------------------


def read_records(path):
    rows = []
    for line in path.read_text().splitlines():
        rows.append(dict(tok.split("=", 1) for tok in line.split()))
    return rows


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY_CONFIG)
    return path


def test_gen_twice_identical(tmp_path):
    a, b = tmp_path / "a.tsv", tmp_path / "b.tsv"
    assert main(["gen", "--seed", "7", "-n", "1000", "-o", str(a), "--out", str(tmp_path)]) == 0
    assert main(["--seed", "7", "gen", "-n", "1000", "-o", str(b), "--out", str(tmp_path)]) == 0
    assert a.read_bytes() == b.read_bytes()
    recs = read_records(tmp_path / "gen.records")
    assert recs[0]["rows"] == "1000"
    assert sum(int(r["rows"]) for r in recs if r["kind"] == "gen_domain") == 1000


def test_exit_codes(tmp_path, cfg_file, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("[model]\ndcn_rnk = 4\n")
    assert main(["--config", str(bad), "gen", "-n", "5", "--out", str(tmp_path)]) == 3
    assert "dcn_rnk" in capsys.readouterr().err
    assert main(["nonsense"]) == 1
    assert main(["gen"]) == 1
    assert main(["--seed", "-4", "gen", "-n", "3"]) == 1
    junk = tmp_path / "junk.emb"
    junk.write_bytes(b"NOPE" + bytes(20))
    data = tmp_path / "d.tsv"
    assert main(["gen", "-n", "20", "-o", str(data), "--out", str(tmp_path)]) == 0
    assert main(["--config", str(cfg_file), "train", "--train", str(data), "--out", str(tmp_path)]) == 0
    model = tmp_path / "model.ckpt"
    assert main(["rank", "--model", str(model), "--emb", str(junk), "--queries", str(data), "--out", str(tmp_path)]) == 2
    assert main(["eval", "--model", str(tmp_path / "absent.ckpt"), "--data", str(data), "--out", str(tmp_path)]) == 2
    assert main(["--mix", "x"]) == 1


def test_cli_pipeline(tmp_path, cfg_file):
    out = tmp_path / "run"
    common = ["--config", str(cfg_file), "--seed", "3", "--out", str(out)]
    train, items = tmp_path / "train.tsv", tmp_path / "items.tsv"
    assert main(common + ["gen", "-n", "240", "-o", str(train)]) == 0
    assert main(common + ["gen", "-n", "30", "--first-id", "5000", "-o", str(items), "--seed", "4"]) == 0
    assert main(common + ["train", "--train", str(train)]) == 0
    model = out / "model.ckpt"
    assert main(common + ["eval", "--model", str(model), "--data", str(items)]) == 0
    overall = [r for r in read_records(out / "eval.records") if r["kind"] == "overall"]
    assert math.isfinite(float(overall[0]["logmae"]))

    assert main(common + ["export-emb", "--model", str(model), "--items", str(items)]) == 0
    assert main(common + ["rank", "--model", str(model), "--emb", str(out / "items.emb"), "--queries", str(items), "-k", "10", "--task", "CTR"]) == 0
    ranks = read_records(out / "rank.records")
    assert 0 < len(ranks) <= 10
    probs = [float(r["prob"]) for r in ranks]
    assert probs == sorted(probs, reverse=True)
    assert {int(r["item_id"]) for r in ranks} <= set(range(5000, 5030))

    assert main(common + ["train-baselines", "--train", str(train), "--steps", "6"]) == 0
    assert len(list(out.glob("baseline_*.ckpt"))) == 6
    assert main(common + ["compare", "--model", str(model), "--baselines", str(out), "--data", str(items)]) == 0
    cells = [r for r in read_records(out / "compare.records") if r["kind"] == "compare"]
    assert len(cells) == 18
    assert sum(r["improvement_pct"] == "NA" for r in cells) >= 3

    assert main(common + ["ablate", "--train", str(train), "--data", str(items), "--variants", "no_dcn", "--seeds", "0,1", "--steps", "1"]) == 0
    medians = [r for r in read_records(out / "ablate.records") if r["kind"] == "ablation_median"]
    assert [r["variant"] for r in medians] == ["full", "no_dcn"]
    assert float(medians[0]["delta_pct"]) == 0.0
