import io
import subprocess
import sys
from dataclasses import replace

import numpy as np
import pytest

from pedgqls.cli import ScanConfig, main, run_scan, write_results
from pedgqls.genodata import write_genotypes
from pedgqls.pedigree import write_pedigree
from pedgqls.simulate import gene_drop, generate_trait, grow_multifamily_sample

TRIO = "A . .\nB . .\nC A B\n"


def write_dataset(tmp_path, seed, n=120, n_markers=12, model="qt3", planted=3, populations=False,
                  maf=0.3, missing=0.05, marker_order=None):
    """Simulated pedigree/genotype/phenotype files with one planted marker."""
    rng = np.random.default_rng(seed)
    ped = grow_multifamily_sample(n, rng)
    markers = gene_drop(ped, maf, n_markers, rng, subjects=ped.ids)
    trait = generate_trait(model, [markers[planted]], rng).values
    masked = []
    for m in markers:
        drop = rng.random(n) < missing
        masked.append(replace(m, y=np.where(drop, np.nan, m.y), missing=drop))
    markers = masked
    if marker_order is not None:
        markers = [markers[k] for k in marker_order]
    paths = {k: tmp_path / f"{k}.txt" for k in ("ped", "geno", "pheno")}
    with open(paths["ped"], "w") as fh:
        write_pedigree(ped, fh)
    with open(paths["geno"], "w") as fh:
        write_genotypes(markers, fh)
    with open(paths["pheno"], "w") as fh:
        fh.write("subject_id\ttrait" + ("\tpopulation" if populations else "") + "\n")
        for i, (s, v) in enumerate(zip(ped.ids, trait)):
            pop = f"\t{'north' if i % 3 else 'south'}" if populations else ""
            fh.write(f"{s}\t{float(v)!r}{pop}\n")
    return paths


def scan_args(paths, *extra):
    return ["scan", "--pedigree", str(paths["ped"]), "--genotypes", str(paths["geno"]),
            "--phenotypes", str(paths["pheno"]), *extra]


def config(paths, **kw):
    return ScanConfig(str(paths["ped"]), str(paths["geno"]), str(paths["pheno"]), **kw)


def result_text(output):
    buf = io.StringIO()
    write_results(output.results, buf)
    return buf.getvalue()


class TestKinship:
    def test_trio(self, tmp_path, capsys):
        ped = tmp_path / "trio.ped"
        ped.write_text(TRIO)
        inb = tmp_path / "inb.tsv"
        assert main(["kinship", "--pedigree", str(ped), "--inbreeding-out", str(inb)]) == 0
        rows = capsys.readouterr().out.splitlines()
        assert rows[0] == "id_i\tid_j\tphi" and len(rows) == 7
        assert "A\tC\t0.25" in rows and "A\tB\t0" in rows
        assert inb.read_text().splitlines()[0] == "id\tphi_self"

    def test_cycle(self, tmp_path, capsys):
        ped = tmp_path / "cyc.ped"
        ped.write_text("X Y Z\nY X Z\nZ . .\n")
        assert main(["kinship", "--pedigree", str(ped)]) == 2
        err = capsys.readouterr().err
        assert "cycle" in err and "X" in err and "Y" in err

    def test_line_numbered_error(self, tmp_path, capsys):
        ped = tmp_path / "bad.ped"
        ped.write_text("A . .\nB . .\nC A Q\n")
        assert main(["kinship", "--pedigree", str(ped)]) == 2
        assert "line 3" in capsys.readouterr().err

    def test_subject_list(self, tmp_path, capsys):
        ped = tmp_path / "trio.ped"
        ped.write_text(TRIO)
        subj = tmp_path / "subj.txt"
        subj.write_text("C\nA\n")
        out = tmp_path / "kin.tsv"
        assert main(["kinship", "--pedigree", str(ped), "--subjects", str(subj), "--out", str(out)]) == 0
        assert out.read_text().splitlines()[1:] == ["C\tC\t0.5", "C\tA\t0.25", "A\tA\t0.5"]


class TestScan:
    def test_outputs_and_summary(self, tmp_path, capsys):
        paths = write_dataset(tmp_path, 1)
        out = tmp_path / "res.tsv"
        assert main(scan_args(paths, "--method", "both", "--out", str(out))) == 0
        lines = out.read_text().splitlines()
        assert lines[0].split("\t") == ["marker_id", "method", "df", "statistic", "p_value", "mu_hat", "n_used", "flags"]
        assert len(lines) == 1 + 2 * 12
        p = [float(r.split("\t")[4]) for r in lines[1:]]
        assert p == sorted(p)
        methods = {r.split("\t")[1] for r in lines[1:]}
        assert methods == {"trend", "multi-family"}
        err = capsys.readouterr().err
        assert "markers_tested=12" in err and "bonferroni_threshold_5pct=0.004167" in err

    def test_marker_order_invariance(self, tmp_path):
        (tmp_path / "a").mkdir()
        (tmp_path / "b").mkdir()
        a = write_dataset(tmp_path / "a", 2)
        order = list(np.random.default_rng(0).permutation(12))
        b = write_dataset(tmp_path / "b", 2, marker_order=order)
        assert result_text(run_scan(config(a))) == result_text(run_scan(config(b)))

    def test_all_below_maf(self, tmp_path, capsys):
        paths = write_dataset(tmp_path, 3, maf=0.3)
        assert main(scan_args(paths, "--min-maf", "0.49")) == 0
        captured = capsys.readouterr()
        assert captured.out.splitlines() == ["\t".join(
            ["marker_id", "method", "df", "statistic", "p_value", "mu_hat", "n_used", "flags"])]
        assert "markers_tested=0" in captured.err and "maf=12" in captured.err

    def test_stratified_detail_rows(self, tmp_path):
        paths = write_dataset(tmp_path, 4, populations=True)
        out = run_scan(config(paths, stratify_by="population"))
        for res in out.results:
            if not res.ok:
                continue
            labels = [label for label, _ in res.detail]
            assert labels == ["north", "south"]
            assert res.statistic == pytest.approx(sum(d.statistic for _, d in res.detail), rel=1e-14)
            assert res.df == 2
        text = result_text(out)
        assert "stratified:north" in text and "stratified:south" in text

    def test_missing_strata_column(self, tmp_path, capsys):
        paths = write_dataset(tmp_path, 4)
        assert main(scan_args(paths, "--stratify-by", "herd")) == 2
        assert "herd" in capsys.readouterr().err

    def test_duplicates_need_merge(self, tmp_path, capsys):
        paths = write_dataset(tmp_path, 5)
        text = paths["geno"].read_text().splitlines()
        paths["geno"].write_text("\n".join(text + [text[1]]) + "\n")
        assert main(scan_args(paths)) == 2
        assert "--merge-duplicates" in capsys.readouterr().err
        assert main(scan_args(paths, "--merge-duplicates")) == 0
        assert "merged duplicate subjects" in capsys.readouterr().err

    def test_all_degenerate_exit_one(self, tmp_path):
        (tmp_path / "p").write_text(TRIO)
        (tmp_path / "g").write_text("subject_id\tm1\nA\tA/G\nB\tA/A\nC\tA/G\n")
        (tmp_path / "t").write_text("subject_id\ttrait\nA\t1\nB\t.\nC\t.\n")
        paths = {"ped": tmp_path / "p", "geno": tmp_path / "g", "pheno": tmp_path / "t"}
        assert main(scan_args(paths, "--min-maf", "0")) == 1

    def test_flags_for_degenerate_marker(self, tmp_path, capsys):
        (tmp_path / "p").write_text(TRIO + "D . .\n")
        (tmp_path / "g").write_text(
            "subject_id\tgood\tbad\nA\tA/G\tA/G\nB\tA/A\t./.\nC\tG/G\t./.\nD\tA/G\tA/G\n")
        (tmp_path / "t").write_text("subject_id\ttrait\nA\t0\nB\t1\nC\t1\nD\t0\n")
        paths = {"ped": tmp_path / "p", "geno": tmp_path / "g", "pheno": tmp_path / "t"}
        assert main(scan_args(paths, "--max-missing", "0.6")) == 0
        rows = [r.split("\t") for r in capsys.readouterr().out.splitlines()[1:]]
        bad = next(r for r in rows if r[0] == "bad")
        assert bad[7] == "trait_constant" and bad[3] == "NA"

    def test_thread_determinism(self, tmp_path):
        paths = write_dataset(tmp_path, 6, n=200, n_markers=30, missing=0.1)
        texts = {result_text(run_scan(config(paths, threads=t))) for t in (1, 2, 4)}
        assert len(texts) == 1

    def test_invalid_threshold(self, tmp_path, capsys):
        paths = write_dataset(tmp_path, 7)
        assert main(scan_args(paths, "--min-maf", "0.7")) == 2

    def test_threads_from_environment(self, monkeypatch):
        from pedgqls.cli import build_parser
        monkeypatch.setenv("PEDGQLS_THREADS", "3")
        args = build_parser().parse_args(["simulate", "x.spec"])
        assert args.threads == 3

    @pytest.mark.slow
    def test_planted_marker_ranks_first(self, tmp_path):
        wins = 0
        seeds = range(20)
        for seed in seeds:
            d = tmp_path / str(seed)
            d.mkdir()
            paths = write_dataset(d, 100 + seed, n=500, n_markers=40, planted=17, missing=0.02)
            top = run_scan(config(paths)).results[0]
            wins += top.marker_id == "sim18"
        assert wins >= 0.95 * len(seeds)


class TestSimulate:
    def test_bundled_spec(self, tmp_path, capsys):
        out = tmp_path / "t.tsv"
        assert main(["simulate", "mf_n200_maf03_null_bt.spec", "--replicates", "50", "--out", str(out)]) == 0
        rows = out.read_text().splitlines()
        assert rows[1].startswith("multi-family\t200\t0.3\tnull_bt\tgqls\t0.05")
        assert "MC SE" in capsys.readouterr().err

    def test_zero_replicates(self, tmp_path, capsys):
        spec = tmp_path / "s.spec"
        spec.write_text("design = multi-family\nsize = 50\nmaf = 0.3\nmodel = null_qt\nreplicates = 0\n")
        assert main(["simulate", str(spec)]) == 2
        assert "replicates" in capsys.readouterr().err

    def test_missing_spec(self, capsys):
        assert main(["simulate", "no_such.spec"]) == 2

    def test_threads_identical_files(self, tmp_path):
        outs = []
        for t in (1, 3):
            out = tmp_path / f"o{t}.tsv"
            main(["simulate", "mf_n200_maf03_null_qt.spec", "--replicates", "60", "--seed", "9",
                  "--threads", str(t), "--out", str(out)])
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]


def test_module_entry_point(tmp_path):
    ped = tmp_path / "trio.ped"
    ped.write_text(TRIO)
    proc = subprocess.run([sys.executable, "-m", "pedgqls", "kinship", "--pedigree", str(ped)],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0
    assert proc.stdout.count("\n") == 7
