"""CLI: schema validation, determinism, exit codes, output contracts."""

import json
import math

import numpy as np
import pytest

from tcbm.cli import main

CLOCK = {"family": "cir", "kappa": 0.6, "theta": 0.20, "xi": 0.4, "v0": 0.18}
MARKET = {"spot": 100.0, "rate": 0.03, "dividend": 0.0}


def write_cfg(tmp_path, name, cfg):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


class TestPriceCommand:
    def test_doc_price(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path, "cfg.json", {
            "clock": CLOCK,
            "contract": {"kind": "doc", "strike": 100.0, "maturity": 1.0,
                         "lower_barrier": 70.0},
            "market": MARKET})
        out = tmp_path / "out.csv"
        assert main(["price", "--config", cfg, "--out", str(out)]) == 0
        lines = out.read_text().splitlines()
        assert lines[0].startswith("# tcbm price config_digest=")
        assert lines[1] == "kind,strike,maturity,price,series_terms"
        price = float(lines[2].split(",")[3])
        assert price == pytest.approx(17.045, abs=0.001)

    def test_dko_price_reports_terms(self, tmp_path):
        cfg = write_cfg(tmp_path, "cfg.json", {
            "clock": CLOCK,
            "contract": {"kind": "dko_call", "strike": 100.0, "maturity": 0.25,
                         "lower_barrier": 70.0, "upper_barrier": 130.0},
            "market": MARKET})
        out = tmp_path / "out.csv"
        assert main(["price", "--config", cfg, "--out", str(out)]) == 0
        terms = int(out.read_text().splitlines()[2].split(",")[4])
        assert terms >= 1

    def test_knocked_out_geometry_exit_1(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path, "cfg.json", {
            "clock": CLOCK,
            "contract": {"kind": "uop", "strike": 100.0, "maturity": 1.0,
                         "upper_barrier": 90.0},
            "market": MARKET})
        assert main(["price", "--config", cfg]) == 1
        err = capsys.readouterr().err
        assert "knocked out" in err and "Traceback" not in err

    def test_unknown_field_rejected(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path, "cfg.json", {
            "clock": {**CLOCK, "bogus": 1.0},
            "contract": {"kind": "doc", "strike": 100.0, "maturity": 1.0,
                         "lower_barrier": 70.0},
            "market": MARKET})
        assert main(["price", "--config", cfg]) == 1
        assert "unknown fields" in capsys.readouterr().err

    def test_missing_config_file(self, capsys):
        assert main(["price", "--config", "/nonexistent.json"]) == 1

    def test_determinism_bitwise(self, tmp_path):
        cfg = write_cfg(tmp_path, "cfg.json", {
            "clock": CLOCK,
            "contract": {"kind": "doc", "strike": 100.0, "maturity": 0.5,
                         "lower_barrier": 70.0},
            "market": MARKET})
        out1, out2 = tmp_path / "a.csv", tmp_path / "b.csv"
        main(["price", "--config", cfg, "--out", str(out1)])
        main(["price", "--config", cfg, "--out", str(out2)])
        assert out1.read_bytes() == out2.read_bytes()


class TestVanillaCommand:
    def test_ladder(self, tmp_path):
        cfg = write_cfg(tmp_path, "cfg.json", {
            "clock": CLOCK, "market": MARKET,
            "maturities": [0.5, 1.0], "strikes": [90.0, 100.0, 110.0]})
        out = tmp_path / "v.csv"
        assert main(["vanilla", "--config", cfg, "--out", str(out)]) == 0
        lines = out.read_text().splitlines()
        assert lines[1] == "maturity,strike,kind,price,implied_vol"
        assert len(lines) == 2 + 6


class TestPadeCommand:
    def test_sweep_and_poles(self, tmp_path):
        cfg = write_cfg(tmp_path, "cfg.json", {
            "coefficients": [6.4521, 1.6468, -0.4123, 0.2845, -0.1523, 0.0892],
            "rho_grid": [-0.7, 0.7]})
        out = tmp_path / "p.csv"
        assert main(["pade", "--config", cfg, "--out", str(out)]) == 0
        text = out.read_text()
        assert "(approximants)" in text and "(sweep)" in text
        assert "pole_proximity" in text

    def test_degenerate_coefficients_reported(self, tmp_path):
        cfg = write_cfg(tmp_path, "cfg.json", {
            "coefficients": [1.0, 0.0, 0.0, 0.0, 0.0, 0.0]})
        out = tmp_path / "p.csv"
        assert main(["pade", "--config", cfg, "--out", str(out)]) == 0
        assert "degenerate" in out.read_text()


class TestReproTable:
    def test_invalid_table_id(self, capsys):
        assert main(["repro-table", "6.99"]) == 1
        assert "unknown table id" in capsys.readouterr().err

    def test_price_table_runs_small(self, tmp_path, capsys, monkeypatch):
        # shrink the MC so the command stays fast in unit tests
        import tcbm.reference as ref
        from tcbm.mc import McConfig
        monkeypatch.setattr(ref, "desk_mc_config",
                            lambda seed=0: McConfig(n_paths=20_000,
                                                    n_steps_per_year=130,
                                                    seed=seed))
        out = tmp_path / "t.csv"
        assert main(["repro-table", "6.2", "--out", str(out)]) == 0
        lines = out.read_text().splitlines()
        assert lines[1].startswith("T,semi_analytic,mc,se,rel_err")
        stderr = capsys.readouterr().err
        assert "analytic-vs-internal-mc" in stderr


class TestCalibrateCommand:
    def test_small_vanilla_calibration(self, tmp_path):
        from tcbm.clocks import CirClock
        from tcbm.barrier import MarketEnv
        from tcbm.vanilla import VanillaQuote, cos_vanilla_price, implied_vol
        spec = CirClock(**{k: CLOCK[k] for k in ("kappa", "theta", "xi", "v0")})
        market = MarketEnv(**MARKET)
        vanillas = []
        for T in (0.5, 1.0):
            for K in (90.0, 100.0, 110.0):
                price = cos_vanilla_price(spec, market, VanillaQuote(T, K, "call"))
                vol = implied_vol(price, market, VanillaQuote(T, K, "call"))
                vanillas.append({"maturity": T, "strike": K, "kind": "call",
                                 "price": price, "implied_vol": vol})
        from tcbm.vanilla import variance_swap_strike
        varswaps = [{"maturity": T, "strike": variance_swap_strike(spec, T)}
                    for T in (1 / 12, 0.25, 0.5, 1.0, 2.0, 5.0)]
        dataset = write_cfg(tmp_path, "data.json", {
            "market": MARKET, "vanillas": vanillas, "varswaps": varswaps})
        out = tmp_path / "fit.txt"
        assert main(["calibrate", "--dataset", dataset, "--family", "cir",
                     "--stages", "1", "--out", str(out)]) == 0
        text = out.read_text()
        fitted = {line.split(",")[0]: line.split(",")[1]
                  for line in text.splitlines() if "," in line}
        assert float(fitted["v0"]) == pytest.approx(0.18, rel=0.05)
        assert float(fitted["theta"]) == pytest.approx(0.20, rel=0.05)

    def test_markov_family_rejected(self, tmp_path, capsys):
        dataset = write_cfg(tmp_path, "data.json", {
            "market": MARKET,
            "vanillas": [{"maturity": 1.0, "strike": 100.0, "price": 8.0}]})
        assert main(["calibrate", "--dataset", dataset, "--family", "markov"]) == 1


class TestMcValidate:
    def test_csv_contract(self, tmp_path, monkeypatch):
        import tcbm.reference as ref
        from tcbm.mc import McConfig
        monkeypatch.setattr(ref, "desk_mc_config",
                            lambda seed=0: McConfig(n_paths=10_000,
                                                    n_steps_per_year=130,
                                                    seed=seed))
        cfg = write_cfg(tmp_path, "cfg.json", {"tables": ["6.2"], "seed": 7})
        out = tmp_path / "mc.csv"
        assert main(["mc-validate", "--config", cfg, "--out", str(out)]) == 0
        lines = out.read_text().splitlines()
        assert lines[1] == "table,T,analytic,mc,se,rel_err"
        assert len(lines) == 4  # two maturities
