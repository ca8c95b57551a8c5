import numpy as np
import pytest
from scipy.stats import norm

from copulafill.cli import main
from copulafill.data_model import read_csv, write_csv
from copulafill.evaluation import mask_mcar, random_correlation, sample_gc


@pytest.fixture()
def toy_csv(tmp_path):
    corr = random_correlation(3, seed=0)
    truth = sample_gc(200, [norm.ppf, norm(loc=2).ppf, norm(scale=3).ppf],
                      corr=corr, seed=1)
    masked = mask_mcar(truth, 0.15, seed=2)
    truth_path = tmp_path / "truth.csv"
    masked_path = tmp_path / "masked.csv"
    write_csv(truth_path, truth.values, truth.col_names)
    write_csv(masked_path, masked.values, masked.col_names)
    return truth_path, masked_path


class TestImputeCommand:
    def test_fills_all_cells(self, toy_csv, tmp_path):
        _, masked_path = toy_csv
        out = tmp_path / "out.csv"
        assert main(["impute", str(masked_path), "-o", str(out)]) == 0
        got = read_csv(out)
        assert not np.isnan(got.values).any()
        assert got.col_names == ["col0", "col1", "col2"]

    def test_observed_cells_preserved(self, toy_csv, tmp_path):
        _, masked_path = toy_csv
        out = tmp_path / "out.csv"
        main(["impute", str(masked_path), "-o", str(out)])
        masked = read_csv(masked_path)
        got = read_csv(out)
        obs = ~np.isnan(masked.values)
        assert np.allclose(got.values[obs], masked.values[obs], rtol=1e-5)

    def test_byte_identical_reruns(self, toy_csv, tmp_path):
        _, masked_path = toy_csv
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        main(["impute", str(masked_path), "-o", str(a), "--seed", "3"])
        main(["impute", str(masked_path), "-o", str(b), "--seed", "3"])
        assert a.read_bytes() == b.read_bytes()

    def test_minibatch_requires_wide_batches(self, toy_csv, tmp_path, capsys):
        _, masked_path = toy_csv
        code = main(["impute", str(masked_path), "-o", str(tmp_path / "x.csv"),
                     "--mode", "minibatch-offline", "--batch-size", "2"])
        assert code == 1
        assert "batch size" in capsys.readouterr().err

    def test_minibatch_mode_runs(self, toy_csv, tmp_path):
        _, masked_path = toy_csv
        out = tmp_path / "mb.csv"
        code = main(["impute", str(masked_path), "-o", str(out),
                     "--mode", "minibatch-offline", "--batch-size", "50"])
        assert code == 0
        assert not np.isnan(read_csv(out).values).any()

    def test_rank_routes_to_lowrank(self, tmp_path):
        from copulafill.lrgc import LowRankParams

        rng = np.random.default_rng(4)
        w = rng.standard_normal((6, 2))
        w *= np.sqrt(0.85) / np.linalg.norm(w, axis=1, keepdims=True)
        tab = sample_gc(300, [norm.ppf] * 6,
                        lowrank=LowRankParams(w, 0.15), seed=5)
        masked = mask_mcar(tab, 0.2, seed=6)
        path = tmp_path / "wide.csv"
        write_csv(path, masked.values, masked.col_names)
        out = tmp_path / "wide_imp.csv"
        corr_out = tmp_path / "corr.csv"
        code = main(["impute", str(path), "-o", str(out), "--rank", "2",
                     "--corr-out", str(corr_out)])
        assert code == 0
        corr = read_csv(corr_out).values
        # rank-2 plus isotropic noise: the trailing eigenvalues are equal
        w_eig = np.sort(np.linalg.eigvalsh(corr))
        assert np.allclose(w_eig[:4], w_eig[0], atol=1e-8)

    def test_ci_files(self, toy_csv, tmp_path):
        _, masked_path = toy_csv
        out = tmp_path / "out.csv"
        code = main(["impute", str(masked_path), "-o", str(out),
                     "--ci", "analytic", "--alpha", "0.05"])
        assert code == 0
        lo = read_csv(tmp_path / "out_ci_lower.csv")
        hi = read_csv(tmp_path / "out_ci_upper.csv")
        masked = read_csv(masked_path)
        cells = np.isnan(masked.values)
        assert np.all(lo.values[cells] <= hi.values[cells])
        assert np.isnan(lo.values[~cells]).all()

    def test_multiple_files(self, toy_csv, tmp_path):
        _, masked_path = toy_csv
        out = tmp_path / "out.csv"
        code = main(["impute", str(masked_path), "-o", str(out),
                     "--multiple", "3"])
        assert code == 0
        for k in (1, 2, 3):
            draws = read_csv(tmp_path / f"out_imp{k}.csv")
            assert not np.isnan(draws.values).any()

    def test_types_override(self, toy_csv, tmp_path):
        _, masked_path = toy_csv
        out = tmp_path / "out.csv"
        code = main(["impute", str(masked_path), "-o", str(out),
                     "--types", "continuous,continuous,continuous"])
        assert code == 0

    def test_workers_flag_matches_serial(self, toy_csv, tmp_path):
        _, masked_path = toy_csv
        a, b = tmp_path / "serial.csv", tmp_path / "par.csv"
        assert main(["impute", str(masked_path), "-o", str(a)]) == 0
        assert main(["impute", str(masked_path), "-o", str(b),
                     "--workers", "2"]) == 0
        va, vb = read_csv(a).values, read_csv(b).values
        assert np.allclose(va, vb, atol=1e-6)

    def test_parse_failure_exit_2(self, tmp_path, capsys):
        bad = tmp_path / "bad.csv"
        bad.write_text("a,b\n1,zzz\n")
        code = main(["impute", str(bad), "-o", str(tmp_path / "x.csv")])
        assert code == 2
        assert "parse failure" in capsys.readouterr().err

    def test_missing_file_exit_2(self, tmp_path):
        assert main(["impute", str(tmp_path / "none.csv"),
                     "-o", str(tmp_path / "x.csv")]) == 2

    def test_flag_validation_exit_1(self, toy_csv, tmp_path):
        _, masked_path = toy_csv
        out = str(tmp_path / "x.csv")
        assert main(["impute", str(masked_path), "-o", out,
                     "--alpha", "1.5"]) == 1
        assert main(["impute", str(masked_path), "-o", out,
                     "--types", "widget,a,b"]) == 1
        assert main(["impute", str(masked_path), "-o", out,
                     "--mode", "minibatch-online"]) == 1

    def test_online_fit_failure_exit_3(self, tmp_path, capsys):
        path = tmp_path / "empty_col.csv"
        path.write_text("a,b\n1,\n2,\n3,\n")
        code = main(["impute", str(path), "-o", str(tmp_path / "x.csv")])
        assert code == 3
        assert "fit failed" in capsys.readouterr().err

    def test_help_lists_defaults(self, capsys):
        assert main(["impute", "--help"]) == 0
        text = capsys.readouterr().out
        assert main(["stream", "--help"]) == 0
        stream_text = capsys.readouterr().out
        for token in ("--tol", "0.01", "--batch-size", "100"):
            assert token in text
        for token in ("--decay", "--window-size", "200", "0.1"):
            assert token in stream_text


class TestStreamCommand:
    @pytest.fixture()
    def stream_files(self, tmp_path):
        # two always-hidden columns revealed one tick later, as in a daily
        # feed where some series lag behind the others
        corr = random_correlation(4, seed=30, n_factors=2, noise=0.5)
        truth = sample_gc(140, [norm.ppf] * 4, corr=corr, seed=7)
        masked = truth.values.copy()
        masked[:, 2] = np.nan
        masked[:, 3] = np.nan
        in_path = tmp_path / "stream.csv"
        truth_path = tmp_path / "stream_truth.csv"
        write_csv(in_path, masked, truth.col_names)
        write_csv(truth_path, truth.values, truth.col_names)
        return in_path, truth_path

    def test_end_to_end_with_truth(self, stream_files, tmp_path):
        in_path, truth_path = stream_files
        out = tmp_path / "streamed.csv"
        code = main(["stream", str(in_path), "-o", str(out),
                     "--truth", str(truth_path), "--n-train", "25",
                     "--window-size", "30", "--batch-size", "10",
                     "--decay", "0.01"])
        assert code == 0
        got = read_csv(out)
        assert got.col_names[-1] == "warmup"
        warm = got.values[:, -1]
        assert np.all(warm[:25] == 1) and np.all(warm[25:] == 0)
        # warmup rows are echoed, later rows are imputed
        assert np.isnan(got.values[:25, 2]).all()
        assert not np.isnan(got.values[25:, :4]).any()

    def test_decay_zero_rejected(self, stream_files, tmp_path):
        in_path, truth_path = stream_files
        code = main(["stream", str(in_path), "-o", str(tmp_path / "x.csv"),
                     "--decay", "0"])
        assert code == 1
        assert main(["stream", str(in_path), "-o", str(tmp_path / "y.csv"),
                     "--truth", str(truth_path), "--decay", "0.01"]) == 0

    def test_too_few_rows_for_warmup(self, tmp_path):
        path = tmp_path / "short.csv"
        path.write_text("a,b\n1,2\n3,4\n")
        code = main(["stream", str(path), "-o", str(tmp_path / "x.csv"),
                     "--n-train", "10"])
        assert code == 2


class TestEvaluateCommand:
    def test_perfect_and_median_scores(self, toy_csv, tmp_path, capsys):
        truth_path, masked_path = toy_csv
        truth = read_csv(truth_path)
        masked = read_csv(masked_path)
        med = np.nanmedian(masked.values, axis=0)
        median_imp = np.where(np.isnan(masked.values), med, masked.values)
        med_path = tmp_path / "median.csv"
        write_csv(med_path, median_imp, truth.col_names)
        code = main(["evaluate", "--truth", str(truth_path),
                     "--masked", str(masked_path), "--imputed", str(med_path)])
        assert code == 0
        out = capsys.readouterr().out
        assert "1.000" in out and "pooled mae" in out

        code = main(["evaluate", "--truth", str(truth_path),
                     "--masked", str(masked_path), "--imputed", str(truth_path)])
        out = capsys.readouterr().out
        assert code == 0
        assert "0.000" in out

    def test_coverage_line_format(self, toy_csv, tmp_path, capsys):
        truth_path, masked_path = toy_csv
        out = tmp_path / "out.csv"
        main(["impute", str(masked_path), "-o", str(out), "--ci", "analytic"])
        code = main(["evaluate", "--truth", str(truth_path),
                     "--masked", str(masked_path), "--imputed", str(out),
                     "--ci-lower", str(tmp_path / "out_ci_lower.csv"),
                     "--ci-upper", str(tmp_path / "out_ci_upper.csv")])
        assert code == 0
        lines = capsys.readouterr().out.splitlines()
        import re

        assert any(re.fullmatch(r"coverage: 0\.\d{3}", ln) for ln in lines)
