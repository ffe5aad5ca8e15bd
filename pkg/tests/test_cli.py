import csv
import io

import numpy as np
import pytest

from oracles import brute_jaccard
from viflab import experiments as ex
from viflab.cli import (
    cmd_ablate_drop,
    cmd_analyze_allocation,
    cmd_compare_strategies,
    cmd_run_mas,
    cmd_score_hs,
    main,
)
from viflab.config import OUTPUT_ROOT_ENV, PRESETS, ExperimentConfig, dump_config, load_config
from viflab.csvio import format_value, parse_value, read_csv, render_csv, write_csv
from viflab.errors import ConfigError, ValidationError
from viflab.mas import read_trace_records
from viflab.metrics import HSRecord, hs_score
from viflab.selection import read_pgm


@pytest.fixture
def smoke(tmp_path):
    return load_config(None, {"preset": "smoke", "output_dir": str(tmp_path / "out")})


class TestConfig:
    def test_defaults(self):
        cfg = load_config()
        assert (cfg.omega, cfg.tau, cfg.alpha_middle, cfg.alpha_deep) == (0.3, 0.8, 0.1, 0.3)
        assert cfg.decode_temperature == 1.0 and cfg.preset == "default"

    def test_precedence(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("preset = linear\nturns = 3  # inline comment\ntau = 0.7\n; comment\nomega=0.4\n")
        cfg = load_config(path)
        assert cfg.topology == "linear" and cfg.agents == 5  # from preset
        assert cfg.turns == 3 and cfg.tau == 0.7 and cfg.omega == 0.4
        cfg = load_config(path, {"tau": 0.9, "seed": None})
        assert cfg.tau == 0.9 and cfg.turns == 3 and cfg.seed == 0

    def test_flag_preset_overrides_file_preset(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("preset = linear\n")
        assert load_config(path, {"preset": "layered"}).agents == 6

    @pytest.mark.parametrize(
        "text", ["bogus = 1\n", "turns = many\n", "preset = nope\n", "topology = star\n",
                 "omega = 1.5\n", "tau = 0\n", "realloc_first_turn = maybe\n", "mode = both-ish\n"],
    )
    def test_invalid(self, tmp_path, text):
        path = tmp_path / "c.cfg"
        path.write_text(text)
        with pytest.raises(ConfigError):
            load_config(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "none.cfg")

    def test_dump_round_trip(self, tmp_path):
        cfg = load_config(None, {"preset": "random", "tau": 0.75, "model_seed": 9})
        path = tmp_path / "dump.cfg"
        path.write_text(dump_config(cfg))
        assert load_config(path) == cfg

    def test_seeds_resolve(self):
        cfg = load_config(None, {"seed": 4, "scene_seed": 1})
        assert cfg.resolved_seed("model") == 4 and cfg.resolved_seed("scene") == 1

    def test_output_root_env(self, monkeypatch, tmp_path):
        monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path))
        assert load_config(None, {"preset": "smoke"}).output_path() == tmp_path / "smoke"
        monkeypatch.delenv(OUTPUT_ROOT_ENV)
        assert str(ExperimentConfig().output_path()) == "vif_out/default"

    def test_presets_validate(self):
        for name in PRESETS:
            load_config(None, {"preset": name})


class TestCsv:
    def test_round_trip(self, tmp_path):
        rows = [{"a": 1, "b": 0.1 + 0.2, "c": "x", "d": True, "e": None},
                {"a": np.int64(2), "b": np.float64(1e-300), "c": "y,z", "d": np.bool_(False), "e": 3}]
        path = tmp_path / "t.csv"
        write_csv(path, "viflab/test v1", list("abcde"), rows, ["note one"])
        schema, notes, back = read_csv(path)
        assert schema == "viflab/test v1" and notes == ["note one"]
        assert back[0] == {"a": 1, "b": 0.1 + 0.2, "c": "x", "d": True, "e": None}
        assert back[1] == {"a": 2, "b": 1e-300, "c": "y,z", "d": False, "e": 3}

    def test_format(self):
        text = render_csv("s v1", ["x"], [{"x": 0.5}])
        assert text == "# schema: s v1\nx\n0.5\n"
        assert "\r" not in text
        assert format_value(np.float64(0.25)) == "0.25"
        assert parse_value("") is None and parse_value("7") == 7

    def test_missing_schema(self, tmp_path):
        (tmp_path / "x.csv").write_text("a\n1\n")
        with pytest.raises(ValidationError):
            read_csv(tmp_path / "x.csv")

    def test_parses_with_stdlib(self, tmp_path):
        path = tmp_path / "t.csv"
        write_csv(path, "s v1", ["a", "b"], [{"a": 1, "b": 2.5}])
        body = [l for l in path.read_text().splitlines() if not l.startswith("#")]
        assert list(csv.DictReader(io.StringIO("\n".join(body)))) == [{"a": "1", "b": "2.5"}]


class TestAnalyzeAllocation:
    def test_row_counts_and_sums(self, smoke):
        smoke.svg = False
        paths = cmd_analyze_allocation(smoke)
        by_name = {p.name: p for p in paths}
        _, _, vif = read_csv(by_name["allocation_vif.csv"])
        _, _, base = read_csv(by_name["allocation_baseline.csv"])
        assert len(vif) == 12 * 3 * 5 == 180
        assert len(base) == 12 * 3 * 4
        assert not any(r["token_type"] == "relay" for r in base)
        sums = {}
        for r in vif:
            sums[(r["turn"], r["layer"])] = sums.get((r["turn"], r["layer"]), 0.0) + r["allocation"]
        assert all(abs(v - 1) <= 1e-9 for v in sums.values())

    def test_svg(self, smoke):
        pytest.importorskip("matplotlib")
        smoke.svg = True
        smoke.mode = "baseline"
        paths = cmd_analyze_allocation(smoke)
        svgs = [p for p in paths if p.suffix == ".svg"]
        assert len(svgs) == 3 and svgs[0].read_text().lstrip().startswith("<?xml")


class TestAblate:
    def test_grid(self, smoke):
        path = cmd_ablate_drop(smoke)
        _, notes, rows = read_csv(path)
        assert any("85.2" in n for n in notes)
        assert len(rows) == 3 * 5 * 4 + 1
        ok = [r for r in rows if r["status"] == "ok"]
        assert all(r["verified"] is True for r in ok)
        ref = rows[-1]
        assert (ref["band"], ref["subset"], ref["fraction"]) == ("all", "all", 1.0)
        assert ref["logit_divergence"] == max(r["logit_divergence"] for r in ok)
        for r in rows:
            if r["status"] == "empty":
                assert r["n_dropped"] == 0 and r["logit_divergence"] is None

    def test_empty_set_zero_divergence(self, smoke):
        env, pr = ex.probe(smoke)
        pos = pr.seq.indices(*pr.seq.tags[-1:])
        assert ex.logit_divergence(pr.base.logits, pr.base.logits, pos) == 0.0

    def test_bad_fraction(self, smoke):
        with pytest.raises(ValidationError):
            ex.ablate_drop(smoke, fractions=[1.5])


class TestRunMas:
    def test_outputs(self, smoke):
        paths = cmd_run_mas(smoke)
        names = {p.name for p in paths}
        assert names == {"trace_baseline.jsonl", "trace_vif.jsonl", "metrics.csv", "compare.csv"}
        out = smoke.output_path()
        assert (out / "config.txt").exists()
        _, _, rows = read_csv(out / "metrics.csv")
        for mode in ("baseline", "vif"):
            turns = [r for r in rows if r["mode"] == mode and r["kind"] == "turn"]
            summary = next(r for r in rows if r["mode"] == mode and r["kind"] == "summary")
            assert len(turns) == 3
            rec = HSRecord(tuple(r["h"] for r in turns), tuple(r["d"] for r in turns), summary["D"])
            assert summary["hs"] == hs_score(rec)
            header, recs = read_trace_records(out / f"trace_{mode}.jsonl")
            assert [r["h"] for r in recs] == [r["h"] for r in turns]
        final = {r["mode"]: r for r in rows if r["kind"] == "summary"}
        assert final["vif"]["visual_alloc"] > final["baseline"]["vision_alloc"]

    def test_single_turn(self, tmp_path):
        cfg = load_config(None, {"preset": "single-agent", "output_dir": str(tmp_path), "mode": "vif"})
        cfg.max_steps = 1
        cmd_run_mas(cfg)
        _, _, rows = read_csv(tmp_path / "metrics.csv")
        assert len(rows) == 2 and not (tmp_path / "compare.csv").exists()


class TestCompareStrategies:
    def test_report(self, smoke):
        smoke.omega = 0.1  # toy key norms rarely clear the default
        _, notes, rows = read_csv(cmd_compare_strategies(smoke))
        assert any("70%" in n for n in notes)
        assert sorted({r["buffer"] for r in rows}) == [0, 1, 3, 5, 8]
        for r in rows:
            a = set(str(r["attn_set"] or "").split(";")) - {""}
            b = set(str(r["keynorm_set"] or "").split(";")) - {""}
            assert 0 <= r["overlap"] <= 1
            assert r["overlap"] == brute_jaccard(a, b)
            assert (r["attn_size"], r["keynorm_size"]) == (len(a), len(b))
        sizes = {}
        for r in rows:
            sizes.setdefault(r["turn"], []).append(r["keynorm_size"])
        assert all(s == sorted(s) for s in sizes.values())


class TestMain:
    def test_run_mas_exit_zero(self, tmp_path, capsys):
        assert main(["run-mas", "--preset", "smoke", "--mode", "vif", "--out", str(tmp_path)]) == 0
        assert "metrics.csv" in capsys.readouterr().out

    def test_select_tokens(self, tmp_path):
        assert main(["select-tokens", "--preset", "smoke", "--out", str(tmp_path)]) == 0
        m = read_pgm(tmp_path / "select_attention.pgm")
        _, _, rows = read_csv(tmp_path / "select_attention.csv")
        assert m.sum() == len(rows)
        assert all(m[r["row"], r["col"]] == 1 for r in rows)

    def test_config_error_exit_two(self, tmp_path, capsys):
        assert main(["run-mas", "--preset", "linear", "--turns", "9", "--out", str(tmp_path)]) == 2
        assert "config error" in capsys.readouterr().err

    def test_bad_omega_exit_two(self, tmp_path):
        assert main(["run-mas", "--omega", "2", "--out", str(tmp_path)]) == 2

    def test_score_hs(self, tmp_path, capsys):
        path = tmp_path / "hs.csv"
        write_csv(path, "viflab/hs v1", ["h", "d", "D", "N"], [{"h": 100.0, "d": 10, "D": 10, "N": 1}])
        assert main(["score-hs", str(path)]) == 0
        assert abs(float(capsys.readouterr().out) - 99.3307149075715) < 1e-9
        assert cmd_score_hs(path) == hs_score(HSRecord((100.0,), (10,), 10))

    def test_score_hs_bad_n(self, tmp_path):
        path = tmp_path / "hs.csv"
        write_csv(path, "viflab/hs v1", ["h", "d", "D", "N"], [{"h": 1.0, "d": 0, "D": 2, "N": 3}])
        assert main(["score-hs", str(path)]) == 1

    def test_score_hs_missing_file(self, tmp_path):
        assert main(["score-hs", str(tmp_path / "none.csv")]) == 1

    def test_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main(["run-mas", "--topology", "star"])
        assert exc.value.code == 2
