import csv
import json

import pytest

from qpns.cli import EXIT_CONFIG, EXIT_CONVERGENCE, EXIT_OK, EXIT_RESONANCE, main
from qpns.config import ConfigError, SolverConfig, default_parameter
from qpns.fourier import Field, Lattice
from qpns.inversion import ReducedForm
from qpns.measure import GoodSetPredicate

SMALL = {"L_max": 3, "J_max": 3, "nu_grid": [1e-2, 5e-3, 2.5e-3], "n_samples": 200}


class TestConfig:
    def test_defaults(self):
        cfg = SolverConfig()
        assert cfg.tau_value == 3.0
        assert cfg.gamma_value == pytest.approx(1e-3 ** 0.25)
        assert cfg.M_value == 13
        assert cfg.lam.omega == (1.0966,)
        assert cfg.box_value == [(0.5, 1.5)] * 3
        assert len(cfg.nu_grid) == 7 and cfg.nu_grid[0] == pytest.approx(0.1)

    def test_s0_follows_dimension(self):
        assert SolverConfig().s0 == 3.0
        assert SolverConfig(d=2, L_max=2, J_max=2).s0 == 4.0
        assert SolverConfig(s0=5.0).s0 == 5.0

    def test_json_round_trip_and_hash(self):
        cfg = SolverConfig(eps=2e-3, seed=5)
        back = SolverConfig.from_json(cfg.to_json())
        assert back == cfg
        assert back.hash() == cfg.hash()
        assert cfg.replace(seed=6).hash() != cfg.hash()

    @pytest.mark.parametrize("obj", [{"bogus": 1}, {"d": 0}, {"eps": -1.0}, {"omega": [1.0]},
                                     {"omega": [1.0, 2.0], "zeta": [1.0, 1.0]}, {"s0": 2.0}, [1, 2]])
    def test_rejects(self, obj):
        with pytest.raises(ConfigError):
            SolverConfig.from_dict(obj)

    def test_bad_json(self):
        with pytest.raises(ConfigError):
            SolverConfig.from_json("{not json")

    def test_default_parameter_d2(self):
        lam = default_parameter(2, 2, 2)
        assert lam.d == 2
        assert GoodSetPredicate(Lattice(2, 2, 2), 3.0).excluded_level(lam) > 0


def run(tmp_path, *args, cfg=None):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({**SMALL, **(cfg or {})}))
    return main([*args, "--config", str(path), "--out-dir", str(tmp_path)])


class TestCli:
    def test_full_chain(self, tmp_path):
        assert run(tmp_path, "solve-euler") == EXIT_OK
        assert run(tmp_path, "reduce") == EXIT_OK
        assert run(tmp_path, "solve-ns") == EXIT_OK
        assert run(tmp_path, "sweep-nu") == EXIT_OK
        v = Field.from_bytes((tmp_path / "v_e.field").read_bytes(), "odd")
        assert v.lattice == Lattice(1, 3, 3)
        rf = ReducedForm.load(tmp_path / "reduced.zip")
        assert rf.lattice == v.lattice
        man = json.loads((tmp_path / "sweep-nu.json").read_text())
        assert man["config_sha256"] == SolverConfig.from_dict(SMALL).hash()
        with open(tmp_path / "sweep.csv") as f:
            rows = list(csv.DictReader(f))
        assert [float(r["nu"]) for r in rows] == SMALL["nu_grid"]
        assert set(rows[0]) == {"eps", "nu", "s", "diff_norm", "residual", "slope_fit"}
        assert 0.85 <= man["results"]["slope"] <= 1.15
        assert (tmp_path / "kam_table.csv").exists()

    def test_deterministic(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        a.mkdir()
        b.mkdir()
        assert run(a, "solve-euler") == EXIT_OK
        assert run(b, "solve-euler") == EXIT_OK
        assert (a / "solve-euler.json").read_text() == (b / "solve-euler.json").read_text()
        assert (a / "v_e.field").read_bytes() == (b / "v_e.field").read_bytes()

    def test_measure(self, tmp_path, capsys):
        assert run(tmp_path, "measure", "--gamma-list", "0.05,0.2", "--seed", "3") == EXIT_OK
        man = json.loads((tmp_path / "measure.json").read_text())
        assert man["seed"] == 3
        fr = [r["excluded_fraction"] for r in man["results"]["rows"]]
        assert fr == sorted(fr)
        assert "gamma = 0.05" in capsys.readouterr().out

    def test_config_error(self, tmp_path):
        assert run(tmp_path, "solve-euler", cfg={"unknown": 1}) == EXIT_CONFIG
        assert main(["solve-euler", "--config", str(tmp_path / "missing.json"),
                     "--out-dir", str(tmp_path)]) == EXIT_CONFIG

    def test_resonance_exit(self, tmp_path):
        assert run(tmp_path, "solve-euler", cfg={"omega": [1.0], "zeta": [1.0, 2.0]}) == EXIT_RESONANCE

    def test_convergence_exit(self, tmp_path):
        assert run(tmp_path, "solve-euler", cfg={"eps": 1.0, "gamma": 1e-6,
                                                 "newton_max": 1}) == EXIT_CONVERGENCE

    def test_stored_field_lattice_checked(self, tmp_path):
        assert run(tmp_path, "solve-euler") == EXIT_OK
        assert run(tmp_path, "reduce", cfg={"J_max": 4}) == EXIT_CONFIG
