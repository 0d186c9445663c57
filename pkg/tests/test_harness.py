import json
import math
import warnings

import numpy as np
import pytest

from artifact import cli
from artifact import harness as hn
from artifact import noise
from artifact.harness import ConfigError, ExperimentConfig, GateChoice
from artifact.protocols import ONE_QUBIT_GATE_ANGLES


def rz_pair(**kw):
    base = dict(protocol=[{"kind": "rz", "phi": 0.0},
                          {"kind": "rz", "phi": 2.0}],
                shots=3, noise="ideal")
    base.update(kw)
    return ExperimentConfig(**base)


class TestConfigValidation:
    def test_rejects_zero_shots(self):
        with pytest.raises(ConfigError, match="shots"):
            ExperimentConfig(protocol={"kind": "rz", "phi": 0.1}, shots=0)

    def test_rejects_unknown_preset(self):
        with pytest.raises(ConfigError, match="preset"):
            ExperimentConfig(protocol={"kind": "rz", "phi": 0.1}, shots=1,
                             noise="warm")

    def test_rejects_oracle_with_input(self):
        with pytest.raises(ConfigError, match="prepare their own"):
            ExperimentConfig(protocol={"kind": "oracle", "oracle": 2},
                             shots=1, input_state="+,+")

    def test_rejects_oracle_tomography(self):
        with pytest.raises(ConfigError, match="tomography"):
            ExperimentConfig(protocol={"kind": "oracle", "oracle": 2},
                             shots=1, analyses=("tomography",))

    def test_rejects_mixed_client_dimensions(self):
        with pytest.raises(ConfigError, match="dimensions"):
            ExperimentConfig(protocol=[{"kind": "rz", "phi": 0.1},
                                       {"kind": "intra", "phi": 0.1}],
                             shots=1)

    def test_rejects_reserved_ancilla_target(self):
        with pytest.raises(ConfigError, match="e1"):
            ExperimentConfig(protocol={"kind": "distributed", "entangle": 1,
                                       "targets": ["e1", "n1"]}, shots=1)

    def test_rejects_wrong_input_arity(self):
        with pytest.raises(ConfigError, match="factor"):
            ExperimentConfig(protocol={"kind": "intra", "phi": 0.1},
                             shots=1, input_state="+")

    def test_rejects_unknown_ket_label(self):
        with pytest.raises(ConfigError, match="ket label"):
            ExperimentConfig(protocol={"kind": "rz", "phi": 0.1},
                             shots=1, input_state="up")

    def test_rejects_unknown_check(self):
        with pytest.raises(ConfigError, match="unknown check"):
            rz_pair(checks={"min_luck": 1.0})

    def test_rejects_inverted_band(self):
        with pytest.raises(ConfigError, match="inverted"):
            rz_pair(checks={"fidelity_band": [0.9, 0.1]})

    def test_holevo_check_needs_two_choices(self):
        with pytest.raises(ConfigError, match="two choices"):
            ExperimentConfig(protocol={"kind": "rz", "phi": 0.1}, shots=1,
                             checks={"max_holevo_bits": 0.1})

    def test_verdict_check_needs_oracle(self):
        with pytest.raises(ConfigError, match="oracle"):
            rz_pair(checks={"min_verdict_probability": 0.9})

    def test_schema_tag_is_mandatory(self):
        doc = rz_pair().to_dict()
        assert doc["schema"] == hn.CONFIG_SCHEMA
        doc.pop("schema")
        with pytest.raises(ConfigError, match="schema"):
            ExperimentConfig.from_dict(doc)

    def test_unknown_fields_are_rejected(self):
        doc = rz_pair().to_dict()
        doc["shotss"] = 5
        with pytest.raises(ConfigError, match="shotss"):
            ExperimentConfig.from_dict(doc)

    def test_config_round_trips_through_dict(self):
        cfg = ExperimentConfig(
            protocol=[{"kind": "one-qubit", "name": "hadamard"},
                      {"kind": "rz", "phi": 1.25}],
            shots=4, seed=9, noise="1qbg", mode="trajectory",
            checks={"min_fidelity": 0.5})
        again = ExperimentConfig.from_dict(cfg.to_dict())
        assert again.to_dict() == cfg.to_dict()
        assert again.protocol == cfg.protocol

    def test_hot_train_warns_and_strict_rejects(self):
        proto = {"kind": "oracle", "oracle": 1}
        with pytest.warns(UserWarning, match="train mean"):
            ExperimentConfig(protocol=proto, shots=1,
                             noise={"preset": "dj", "overrides": {"mu": 0.3}})
        with pytest.raises(ConfigError, match="train mean"):
            ExperimentConfig(protocol=proto, shots=1, strict=True,
                             noise={"preset": "dj", "overrides": {"mu": 0.3}})

    def test_preset_mu_values_stay_quiet(self):
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            for name in ("rz-single", "1qbg", "intra", "internode"):
                ExperimentConfig(protocol={"kind": "rz", "phi": 0.1},
                                 shots=1, noise=name)
            ExperimentConfig(protocol={"kind": "oracle", "oracle": 1},
                             shots=1, noise="dj")


class TestChoiceNames:
    def test_label_round_trips_every_kind(self):
        choices = [
            GateChoice.rz(0.75),
            GateChoice("one-qubit", ONE_QUBIT_GATE_ANGLES["hadamard"]),
            GateChoice.one_qubit(0.3, 0.4, 0.5),
            GateChoice.intra(1.5),
            GateChoice.distributed(1),
            GateChoice.distributed(0),
            GateChoice.dj_oracle(3),
        ]
        for c in choices:
            back = hn.choice_from_label(hn.choice_label(c))
            assert back.kind == c.kind
            assert back.entangle == c.entangle
            assert back.oracle == c.oracle
            assert np.allclose(back.angles, c.angles, atol=1e-4)

    def test_dict_form_accepts_compact_and_echo(self):
        compact = hn._choice_from_dict({"kind": "intra", "phi": 0.5})
        echo = hn._choice_from_dict(hn._choice_to_dict(compact))
        assert compact == echo


class TestRng:
    def test_shot_streams_replay(self):
        a = hn.shot_rng(5, 17, lane=2).random(4)
        b = hn.shot_rng(5, 17, lane=2).random(4)
        assert np.array_equal(a, b)

    def test_streams_differ_across_shots_and_lanes(self):
        base = hn.shot_rng(5, 17, lane=2).random(4)
        assert not np.array_equal(base, hn.shot_rng(5, 18, lane=2).random(4))
        assert not np.array_equal(base, hn.shot_rng(5, 17, lane=3).random(4))
        assert not np.array_equal(base, hn.shot_rng(6, 17, lane=2).random(4))

    def test_derived_seeds_are_stable_and_distinct(self):
        seeds = [hn.derive_seed(123, i) for i in range(32)]
        assert seeds == [hn.derive_seed(123, i) for i in range(32)]
        assert len(set(seeds)) == 32
        assert all(0 <= s < 2 ** 63 for s in seeds)

    def test_derived_seed_differs_from_shot_stream(self):
        # tag bit keeps sweep seeding off the shot streams
        shot_first = int(hn.shot_rng(9, 0).integers(0, 2 ** 63))
        assert hn.derive_seed(9, 0) != shot_first


class TestHeraldRates:
    def test_single_photon_rates_are_exact(self):
        # no source statistics: the rate ledger must hit the efficiency
        # product to float precision, in both execution modes
        cases = [
            ({"kind": "rz", "phi": 0.3}, "rz-single"),
            ({"kind": "intra", "phi": 0.5}, "intra"),
            ({"kind": "distributed", "entangle": 1}, "internode"),
            ({"kind": "oracle", "oracle": 1}, "dj"),
        ]
        for proto, preset in cases:
            for mode in ("density-matrix", "trajectory"):
                cfg = ExperimentConfig(
                    protocol=proto, shots=4, seed=3, mode=mode,
                    noise={"preset": preset, "overrides": {"mu": 0.0}})
                s = hn.run(cfg)
                b = s.choices[0]
                assert b["herald_rate"] == pytest.approx(
                    b["expected_herald_rate"], rel=1e-12), (proto, mode)

    def test_ideal_rates_per_protocol_family(self):
        want = {
            ("rz", 0): 0.25,
            ("intra", 0): 0.25,
            ("distributed", 0): 0.125,
            ("oracle", 0): 0.0625,
        }
        protos = [{"kind": "rz", "phi": 0.1}, {"kind": "intra", "phi": 0.1},
                  {"kind": "distributed", "entangle": 0},
                  {"kind": "oracle", "oracle": 4}]
        for proto in protos:
            s = hn.run(ExperimentConfig(protocol=proto, shots=2))
            b = s.choices[0]
            assert b["herald_rate"] == pytest.approx(
                want[(proto["kind"], 0)], rel=1e-12)

    def test_wcs_rate_tracks_model_within_trend(self):
        # weak-coherent carve correlations push the simulated rate a few
        # percent under the first-order product; it must stay close
        cfg = ExperimentConfig(protocol={"kind": "rz", "phi": 0.0},
                               shots=60, seed=2, noise="rz-single",
                               mode="trajectory")
        b = hn.run(cfg).choices[0]
        assert b["herald_rate"] == pytest.approx(
            b["expected_herald_rate"], rel=0.05)

    def test_ledger_buckets_cover_everything(self):
        s = hn.run(ExperimentConfig(protocol={"kind": "intra", "phi": 0.4},
                                    shots=3, noise="intra"))
        led = s.choices[0]["ledger"]
        covered = (led["herald_weight"] + led["vacuum_weight"]
                   + led["multi_weight"] + led["off_window_weight"]
                   + led["rejected_weight"])
        assert covered / led["attempts"] == pytest.approx(1.0, abs=1e-9)


class TestDeterminism:
    def test_same_seed_same_summary(self, tmp_path):
        mk = lambda sub: hn.run(
            ExperimentConfig(protocol={"kind": "intra", "phi": 1.0},
                             shots=5, seed=7, noise="intra",
                             mode="trajectory"),
            out_dir=tmp_path / sub)
        mk("a"), mk("b")
        da = json.loads((tmp_path / "a" / "summary.json").read_text())
        db = json.loads((tmp_path / "b" / "summary.json").read_text())
        da["config"].pop("out_dir"), db["config"].pop("out_dir")
        assert da == db
        assert (tmp_path / "a" / "records.csv").read_bytes() == \
               (tmp_path / "b" / "records.csv").read_bytes()

    def test_worker_count_does_not_change_results(self, tmp_path):
        mk = lambda sub, w: hn.run(
            ExperimentConfig(protocol=[{"kind": "rz", "phi": 0.0},
                                       {"kind": "rz", "phi": 1.0}],
                             shots=8, seed=4, noise="rz-single",
                             mode="trajectory", workers=w),
            out_dir=tmp_path / sub)
        mk("w1", 1), mk("w3", 3)
        da = json.loads((tmp_path / "w1" / "summary.json").read_text())
        db = json.loads((tmp_path / "w3" / "summary.json").read_text())
        for d in (da, db):
            d["config"].pop("out_dir"), d["config"].pop("workers")
        assert da == db
        assert (tmp_path / "w1" / "records.csv").read_bytes() == \
               (tmp_path / "w3" / "records.csv").read_bytes()


class TestLeakage:
    def test_noiseless_choices_leak_nothing(self):
        s = hn.run(rz_pair(shots=2))
        assert s["leakage"]["holevo_bits"] <= 1e-12

    def test_distributed_run_reports_outcome_groups(self):
        s = hn.run(ExperimentConfig(
            protocol=[{"kind": "distributed", "entangle": 0},
                      {"kind": "distributed", "entangle": 1}],
            shots=2))
        leak = s["leakage"]
        assert leak["holevo_bits"] <= 1e-12
        assert leak["outcome_averaged_holevo_bits"] is not None
        assert leak["outcome_averaged_holevo_bits"] <= 1e-12

    def test_oracle_pair_reports_classical_bits(self):
        s = hn.run(ExperimentConfig(
            protocol=[{"kind": "oracle", "oracle": 1},
                      {"kind": "oracle", "oracle": 3}],
            shots=2, mode="density-matrix"))
        leak = s["leakage"]
        assert leak["classical_bits"] is not None
        assert leak["classical_bits"] <= 1e-12
        for b in s.choices:
            assert b["verdict"]["probability"] == pytest.approx(1.0)

    def test_single_choice_has_no_leakage_figures(self):
        s = hn.run(ExperimentConfig(protocol={"kind": "rz", "phi": 0.3},
                                    shots=1))
        assert all(v is None for v in s["leakage"].values())


class TestChecks:
    def test_results_carry_values_and_bounds(self):
        s = hn.run(rz_pair(shots=2, checks={"min_fidelity": 0.99,
                                            "herald_rate_band": [0.2, 0.3]}))
        assert s.checks_passed
        assert s["checks"]["min_fidelity"]["value"] == pytest.approx(1.0)

    def test_failed_check_is_reported_not_raised(self):
        s = hn.run(rz_pair(shots=2, checks={"max_holevo_bits": -1.0}))
        assert not s.checks_passed
        assert not s["checks"]["max_holevo_bits"]["passed"]


class TestSweep:
    def test_empty_values_give_empty_sweep(self, tmp_path):
        assert hn.sweep(rz_pair(), "mu", [], out_dir=tmp_path) == []
        doc = json.loads((tmp_path / "sweep.json").read_text())
        assert doc["schema"] == hn.SWEEP_SCHEMA
        assert doc["points"] == []

    def test_unknown_parameter_rejected(self):
        with pytest.raises(ConfigError, match="sweep parameter"):
            hn.sweep(rz_pair(), "magic", [1.0])

    def test_phi_sweep_needs_rotation_choices(self):
        cfg = ExperimentConfig(protocol={"kind": "distributed", "entangle": 1},
                               shots=1)
        with pytest.raises(ConfigError, match="phi"):
            hn.sweep(cfg, "phi", [0.1])

    def test_mu_sweep_degrades_fidelity_monotonically(self):
        cfg = ExperimentConfig(protocol={"kind": "rz", "phi": 0.3},
                               shots=30, seed=6, noise="rz-single")
        pts = hn.sweep(cfg, "mu", [0.0, 0.15, 0.35])
        fids = [s.choices[0]["fidelity"] for _, s in pts]
        assert fids[0] > fids[1] > fids[2]

    def test_phi_sweep_rewrites_angles_and_derives_seeds(self, tmp_path):
        cfg = ExperimentConfig(protocol={"kind": "rz", "phi": 0.0},
                               shots=1, seed=11)
        pts = hn.sweep(cfg, "phi", [0.5, 1.5], out_dir=tmp_path)
        angles = [s["config"]["protocol"][0]["angles"][0] for _, s in pts]
        assert angles == [0.5, 1.5]
        seeds = [s["config"]["seed"] for _, s in pts]
        assert seeds == [hn.derive_seed(11, 0), hn.derive_seed(11, 1)]
        assert (tmp_path / "point-000" / "summary.json").exists()
        doc = json.loads((tmp_path / "sweep.json").read_text())
        assert [p["value"] for p in doc["points"]] == [0.5, 1.5]


class TestTomography:
    def test_ideal_rz_channel_is_recovered_exactly(self):
        s = hn.run(ExperimentConfig(protocol={"kind": "rz", "phi": 0.7},
                                    shots=1, analyses=("tomography",)))
        chi = s.choices[0]["chi"]
        assert chi["process_fidelity"] == pytest.approx(1.0, abs=1e-9)
        assert chi["average_fidelity"] == pytest.approx(1.0, abs=1e-9)
        assert chi["mean_basis_fidelity"] == pytest.approx(1.0, abs=1e-9)
        table = np.array(s.choices[0]["truth_table"])
        assert np.allclose(table, np.eye(2), atol=1e-9)

    def test_ideal_intra_truth_table_is_diagonal(self):
        s = hn.run(ExperimentConfig(protocol={"kind": "intra", "phi": 2.0},
                                    shots=1, analyses=("tomography",)))
        chi = s.choices[0]["chi"]
        assert chi["process_fidelity"] == pytest.approx(1.0, abs=1e-9)
        table = np.array(s.choices[0]["truth_table"])
        assert np.allclose(table, np.eye(4), atol=1e-9)

    def test_noisy_reconstruction_stays_physical(self):
        # sampled outputs wander slightly negative; the tolerance in the
        # reconstruction absorbs that but the fidelity must stay sane
        s = hn.run(ExperimentConfig(protocol={"kind": "rz", "phi": 0.0},
                                    shots=25, seed=8, noise="rz-single",
                                    analyses=("tomography",)))
        chi = s.choices[0]["chi"]
        assert 0.9 < chi["process_fidelity"] <= 1.0 + 1e-9


class TestRecordsFiles:
    def test_records_round_trip_types(self, tmp_path):
        hn.run(ExperimentConfig(
            protocol=[{"kind": "oracle", "oracle": 1},
                      {"kind": "oracle", "oracle": 4}],
            shots=3, seed=5, noise="dj"), out_dir=tmp_path)
        rows = hn.load_records(tmp_path / "records.csv")
        assert len(rows) == 6
        heralded = [r for r in rows if r["heralded"]]
        assert heralded, "dj preset should herald with folded weights"
        r = heralded[0]
        assert r["server_dm"].shape == (4, 4)
        assert isinstance(r["raw_bits"], dict)
        assert r["clicks"]

    def test_records_leakage_matches_live_summary(self, tmp_path):
        s = hn.run(ExperimentConfig(
            protocol=[{"kind": "distributed", "entangle": 0},
                      {"kind": "distributed", "entangle": 1}],
            shots=4, seed=2, noise="internode"), out_dir=tmp_path)
        redo = hn.records_leakage(tmp_path / "records.csv")
        live = s["leakage"]
        assert redo["holevo_bits"] == pytest.approx(live["holevo_bits"],
                                                    abs=1e-12)
        assert redo["outcome_averaged_holevo_bits"] == pytest.approx(
            live["outcome_averaged_holevo_bits"], abs=1e-12)

    def test_records_chi_matches_live_chi(self, tmp_path):
        s = hn.run(ExperimentConfig(protocol={"kind": "rz", "phi": 0.4},
                                    shots=10, seed=3, noise="rz-single",
                                    analyses=("tomography",)),
                   out_dir=tmp_path)
        redo = hn.records_chi(tmp_path / "records.csv")
        live = s.choices[0]["chi"]["process_fidelity"]
        assert redo["rz[0.4]"]["process_fidelity"] == pytest.approx(
            live, abs=1e-9)

    def test_truncated_records_are_rejected(self, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("shot,choice\n0,rz[0]\n")
        with pytest.raises(ConfigError, match="records"):
            hn.load_records(bad)


class TestReport:
    def test_empty_report_still_writes_headers(self, tmp_path):
        paths = hn.report([], tmp_path)
        for name, path in paths.items():
            lines = path.read_text().splitlines()
            assert len(lines) == 1 or name == "efficiency"
        eff = paths["efficiency"].read_text().splitlines()
        assert eff[0] == "factor"
        assert len(eff) == 10

    def test_expectations_round_trip(self, tmp_path):
        s = hn.run(rz_pair(shots=2))
        paths = hn.report([s], tmp_path)
        table = hn.load_expectations(paths["expectations"])
        assert ("rz[0]", "client") in table.keys()
        row = table.row(("rz[0]", "client"))
        assert set(row) == {"X", "Y", "Z"}
        # the ideal rz(0) on |+> leaves X untouched
        assert row["X"] == pytest.approx(1.0)

    def test_efficiency_table_ratio_near_unity(self, tmp_path):
        s = hn.run(ExperimentConfig(protocol={"kind": "rz", "phi": 0.0},
                                    shots=20, seed=1, noise="rz-single"))
        paths = hn.report([s], tmp_path)
        rows = {line.split(",")[0]: line.split(",")[1]
                for line in paths["efficiency"].read_text().splitlines()[1:]}
        assert float(rows["ratio"]) == pytest.approx(1.0, abs=0.05)
        product = (float(rows["source_p1"]) * float(rows["carve_per_node"])
                   * float(rows["link"]) * float(rows["detection"])
                   * float(rows["window_acceptance"]))
        assert product == pytest.approx(float(rows["expected_total"]),
                                        rel=1e-9)

    def test_summary_files_feed_reports(self, tmp_path):
        hn.run(rz_pair(shots=2), out_dir=tmp_path / "run")
        paths = hn.report([tmp_path / "run"], tmp_path / "rep")
        assert paths["leakage"].exists()


class TestRunSummaryIO:
    def test_save_load_round_trip(self, tmp_path):
        s = hn.run(rz_pair(shots=2))
        path = s.save(tmp_path)
        again = hn.RunSummary.load(path)
        assert again.data == s.data

    def test_wrong_schema_rejected(self, tmp_path):
        path = tmp_path / "summary.json"
        path.write_text(json.dumps({"schema": "something-else"}))
        with pytest.raises(ConfigError, match="artifact-summary"):
            hn.RunSummary.load(path)


class TestCli:
    @pytest.fixture()
    def config_file(self, tmp_path):
        doc = rz_pair(shots=4, seed=3).to_dict()
        doc["checks"] = {"min_fidelity": 0.99}
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(doc))
        return path

    def test_run_and_report_flow(self, config_file, tmp_path, capsys):
        out = tmp_path / "out"
        assert cli.main(["run", str(config_file), "--out", str(out),
                         "--check"]) == 0
        text = capsys.readouterr().out
        assert "rz[0]" in text and "check min_fidelity: pass" in text
        assert (out / "summary.json").exists()
        assert cli.main(["report", str(out), "--out",
                         str(tmp_path / "rep")]) == 0
        assert (tmp_path / "rep" / "efficiency.csv").exists()

    def test_missing_config_exits_2(self, tmp_path, capsys):
        assert cli.main(["run", str(tmp_path / "absent.json")]) == 2
        assert "error:" in capsys.readouterr().err

    def test_invalid_json_exits_2(self, tmp_path, capsys):
        path = tmp_path / "broken.json"
        path.write_text("{not json")
        assert cli.main(["run", str(path)]) == 2

    def test_failed_check_exits_3(self, config_file, tmp_path, capsys):
        assert cli.main(["run", str(config_file), "--check",
                         "--preset", "1qbg"]) == 3
        assert "FAIL" in capsys.readouterr().out

    def test_without_check_flag_failures_only_print(self, config_file,
                                                    capsys):
        assert cli.main(["run", str(config_file), "--preset", "1qbg"]) == 0
        assert "FAIL" in capsys.readouterr().out

    def test_sweep_tomo_leak_commands(self, tmp_path, capsys):
        doc = ExperimentConfig(protocol={"kind": "rz", "phi": 0.2},
                               shots=6, seed=2, noise="rz-single",
                               analyses=("tomography",)).to_dict()
        cfg = tmp_path / "t.json"
        cfg.write_text(json.dumps(doc))
        out = tmp_path / "out"
        assert cli.main(["run", str(cfg), "--out", str(out)]) == 0
        records = out / "records.csv"
        assert cli.main(["tomo", str(records), "--out",
                         str(tmp_path / "chi")]) == 0
        assert (tmp_path / "chi" / "chi.json").exists()
        assert cli.main(["leak", str(records)]) == 0
        assert cli.main(["sweep", str(cfg), "--param", "mu",
                         "--values", "0.0,0.1", "--shots", "2"]) == 0
        text = capsys.readouterr().out
        assert "mu = 0" in text

    def test_bad_sweep_values_exit_2(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps(rz_pair().to_dict()))
        assert cli.main(["sweep", str(cfg), "--param", "mu",
                         "--values", "a,b"]) == 2


class TestNoisySmoke:
    def test_intra_preset_bell_fidelity_band(self):
        # a quick pass over the calibrated operating point; the full
        # statistics live in the acceptance suite
        cfg = ExperimentConfig(protocol={"kind": "intra", "phi": math.pi / 2},
                               shots=250, seed=12, noise="intra",
                               mode="trajectory")
        b = hn.run(cfg).choices[0]
        assert b["heralded_shots"] == 250
        assert 0.80 < b["fidelity"] < 0.90
        assert b["herald_rate"] == pytest.approx(
            b["expected_herald_rate"], rel=0.12)
        assert b["client_entropy_bits"] > 0.1

    def test_verdict_probabilities_split_by_oracle(self):
        s = hn.run(ExperimentConfig(
            protocol=[{"kind": "oracle", "oracle": 1},
                      {"kind": "oracle", "oracle": 2}],
            shots=30, seed=9, noise="dj"))
        probs = {b["label"]: b["verdict"]["probability"] for b in s.choices}
        # oracle 1 decodes cleanly, oracle 2 rides on the noisier branch
        assert probs["oracle[1]"] > 0.95
        assert 0.6 < probs["oracle[2]"] < 0.9
