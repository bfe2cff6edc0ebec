import json

import numpy as np
import pytest

import rsba.jacobians
from rsba.cli import main
from rsba.io import read_problem
from rsba.jacobians import ObservationJacobian


def run(args):
    return main([str(a) for a in args])


class TestSynth:
    def test_deterministic_files(self, tmp_path):
        a1, g1 = tmp_path / "a1", tmp_path / "g1"
        a2, g2 = tmp_path / "a2", tmp_path / "g2"
        assert run(["--seed", 7, "synth", "--out", a1, "--gt-out", g1]) == 0
        assert run(["--seed", 7, "synth", "--out", a2, "--gt-out", g2]) == 0
        assert a1.read_bytes() == a2.read_bytes()
        assert g1.read_bytes() == g2.read_bytes()

    def test_static_noiseless_zero_cost_at_truth(self, tmp_path):
        out, gt = tmp_path / "p", tmp_path / "gt"
        assert run(["--seed", 3, "synth", "--noise", 0, "--speed-ang", 0,
                    "--speed-lin", 0, "--no-perturb", "--out", out, "--gt-out", gt]) == 0
        problem = read_problem(out)
        from rsba.solver import assemble

        _, cost = assemble(problem, "nm")
        assert cost < 1e-16

    def test_default_speed_conversion(self, tmp_path, capsys):
        out, gt = tmp_path / "p", tmp_path / "gt"
        assert run(["--seed", 1, "synth", "--out", out, "--gt-out", gt]) == 0
        echo = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert echo["config"]["angular_speed"] == 10.0
        assert echo["config"]["linear_speed"] == 1.0
        gt_problem = read_problem(gt)
        rows = 1080.0 / 1000.0
        for cam in gt_problem.cameras:
            assert abs(np.linalg.norm(cam.omega) - np.deg2rad(10.0) / rows) < 1e-12


class TestSolve:
    @pytest.fixture
    def files(self, tmp_path):
        out, gt = tmp_path / "p.rsbal", tmp_path / "gt.rsbal"
        run(["--seed", 11, "synth", "--noise", 0, "--points", 30,
             "--out", out, "--gt-out", gt])
        return out, gt

    def test_solve_recovers_noiseless(self, files, tmp_path, capsys):
        out, gt = files
        refined = tmp_path / "refined.rsbal"
        report = tmp_path / "report.jsonl"
        code = run(["solve", out, "--method", "nw", "--backend", "schur2",
                    "--out", refined, "--report", report, "--gt", gt])
        assert code == 0
        printed = capsys.readouterr().out
        assert "iteration" in printed and "terminated" in printed
        lines = [json.loads(x) for x in report.read_text().splitlines()]
        assert lines[0]["format"] == "rsba-report v1"
        assert lines[0]["config"]["method"] == "nw"
        summary = lines[-1]
        assert summary["errors_vs_gt"]["e_point"] < 1e-6
        assert "timings" in summary

    def test_backends_agree_through_cli(self, files, tmp_path):
        out, gt = files
        traces = {}
        for backend in ("dense", "schur2"):
            report = tmp_path / f"r_{backend}.jsonl"
            assert run(["solve", out, "--backend", backend, "--report", report,
                        "--max-iterations", 8]) == 0
            lines = [json.loads(x) for x in report.read_text().splitlines()]
            traces[backend] = [x["cost"] for x in lines if "iteration" in x]
        a, b = np.array(traces["dense"]), np.array(traces["schur2"])
        n = min(len(a), len(b))
        assert np.abs(a[:n] - b[:n]).max() < 1e-8 * np.maximum(1.0, a[:n]).max()

    def test_parse_error_exit_code(self, tmp_path):
        bad = tmp_path / "bad.rsbal"
        bad.write_text("not a problem file\n")
        assert run(["solve", bad]) == 2


class TestSweep:
    def test_small_sweep_csv(self, tmp_path):
        out = tmp_path / "s.csv"
        code = run(["--seed", 5, "sweep", "--kind", "noise", "--methods", "nw",
                    "--trials", 1, "--max-iterations", 3, "--out", out])
        assert code == 0
        lines = out.read_text().splitlines()
        assert lines[0].startswith("# rsba-sweep v1")
        header = lines[2].split(",")
        assert header[:6] == ["sweep_kind", "method", "backend", "coordinate",
                              "trial", "seed"]
        assert len(lines) == 3 + 5  # five noise levels x 1 trial x 1 method

    def test_reproducible_with_seed(self, tmp_path):
        outs = []
        for name in ("a.csv", "b.csv"):
            out = tmp_path / name
            run(["--seed", 7, "sweep", "--kind", "noise", "--methods", "nw",
                 "--trials", 1, "--max-iterations", 2, "--out", out])
            rows = [line.split(",") for line in out.read_text().splitlines()[3:]]
            outs.append([r[:9] for r in rows])  # science columns only
        assert outs[0] == outs[1]


class TestCheckJacobian:
    def test_passes(self, capsys):
        assert run(["--seed", 2, "check-jacobian", "--trials", 50]) == 0
        out = capsys.readouterr().out
        assert "PASS" in out

    def test_mutation_detected(self, capsys, monkeypatch):
        true_jac = rsba.jacobians.jac_observation

        def flipped(cam, p, obs, prior, clamp=False):
            ja = true_jac(cam, p, obs, prior, clamp=clamp)
            return ObservationJacobian(
                J_p=ja.J_p, J_xi=ja.J_xi, J_t=ja.J_t,
                J_omega=-ja.J_omega, J_d=ja.J_d,
            )

        monkeypatch.setattr(rsba.jacobians, "jac_observation", flipped)
        assert run(["--seed", 2, "check-jacobian", "--trials", 10]) == 4
        out = capsys.readouterr().out
        assert "FAIL" in out
        assert "J_omega" in out.split("failing blocks:")[-1]

    def test_static_cases_tight(self, rng, default_prior):
        # no motion: the chain has no weighting terms and the oracle agrees
        # to the finite-difference floor
        from rsba.jacobians import compare_jacobians, jac_finite_difference, jac_observation
        from conftest import random_camera, random_scene_point, synthetic_observation

        for _ in range(20):
            cam = random_camera(rng, speed_ang=0.0, speed_lin=0.0)
            p = random_scene_point(rng)
            obs = synthetic_observation(cam, p, rng, sigma_px=1.0)
            errs = compare_jacobians(
                jac_observation(cam, p, obs, default_prior),
                jac_finite_difference(cam, p, obs, default_prior, h=1e-5),
            )
            for diff, mag in errs.values():
                assert diff < 1e-8 * max(mag, 1.0)
