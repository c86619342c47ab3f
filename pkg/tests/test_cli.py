import subprocess
import sys

import pytest

from hybrid_kd.cli import build_parser, main

TINY = ["--subjects", "3", "--trials-per-paradigm", "10", "--epochs", "1"]


def test_parser_defaults():
    args = build_parser().parse_args(["loso"])
    assert (args.epochs, args.lr, args.batch_size, args.patience) == (200, 1e-3, 32, 5)
    assert (args.temperature, args.lam, args.subjects, args.trials_per_paradigm) == (4.0, 1.0, 10, 80)
    assert (args.class_separation, args.teacher_fraction) == (1.0, 1.0)


def test_gen_data_then_loso(tmp_path, capsys):
    data = tmp_path / "data"
    assert main(["gen-data", "--data-dir", str(data), *TINY]) == 0
    assert (data / "manifest.txt").exists() and (data / "subject_2").is_dir()
    assert main(["loso", "--data-dir", str(data), "--out", str(tmp_path / "out"), "--run-name", "r", *TINY]) == 0
    report = (tmp_path / "out" / "r" / "report.csv").read_text()
    assert report.startswith("model,subject,paradigm_acc,class_acc\n")
    assert "student_kd,mean," in report
    assert "report:" in capsys.readouterr().out


def test_single_fold_commands(tmp_path):
    out = ["--out", str(tmp_path), *TINY]
    assert main(["train-teacher", "--run-name", "t", *out]) == 0
    teacher = tmp_path / "t" / "teacher.hkdm"
    assert teacher.exists() and (tmp_path / "t" / "teacher_history.csv").exists()
    assert main(["distill", "--teacher", str(teacher), "--run-name", "d", *out]) == 0
    assert main(["train-plain", "--run-name", "p", *out]) == 0
    assert main(["evaluate", "--checkpoint", str(tmp_path / "d" / "student_kd.hkdm"), "--run-name", "e", *out]) == 0
    assert "student_kd,0," in (tmp_path / "e" / "report.csv").read_text()
    assert main(["evaluate", "--csp-lda", "--run-name", "c", *out]) == 0


def test_errors_exit_nonzero_with_diagnostic(tmp_path, capsys):
    bad = tmp_path / "bad.hkdm"
    bad.write_bytes(b"nope")
    assert main(["distill", "--teacher", str(bad), "--out", str(tmp_path), *TINY]) == 2
    assert "error" in capsys.readouterr().err
    assert main(["evaluate", "--csp-lda", "--held-out", "9", "--out", str(tmp_path), *TINY]) == 2
    assert "subject 9" in capsys.readouterr().err
    assert main(["loso", "--epochs", "500", "--out", str(tmp_path)]) == 2
    with pytest.raises(SystemExit) as e:
        main(["no-such-command"])
    assert e.value.code != 0


def test_malformed_trial_file_reports_offset(tmp_path, capsys):
    data = tmp_path / "data"
    main(["gen-data", "--data-dir", str(data), *TINY])
    victim = data / "subject_0" / "trial_0.eegt"
    victim.write_bytes(b"EEGX" + victim.read_bytes()[4:])
    assert main(["evaluate", "--csp-lda", "--data-dir", str(data), "--out", str(tmp_path)]) == 2
    assert "offset 3" in capsys.readouterr().err


def test_module_entry_point_grad_check():
    proc = subprocess.run([sys.executable, "-m", "hybrid_kd", "grad-check", "--instances", "2"],
                          capture_output=True, text=True, timeout=600)
    assert proc.returncode == 0, proc.stderr
    assert "conv2d_fft" in proc.stdout and "FAIL" not in proc.stdout
