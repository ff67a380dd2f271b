import json

import pytest

from leadopt.cli import main
from leadopt.molgraph import parse

LEADS = ["CCCCCCO", "CCCCCCCO", "CCCCCNC"]


@pytest.fixture()
def workspace(tmp_path):
    corpus = tmp_path / "corpus.smi"
    rows = [
        "CCCCCCN\tact=0.60", "CCCCCCF\tact=0.70", "CCCCCCS\tact=0.40",
        "CCCCCCCN\tact=0.65", "CCCCCCO\tact=0.50",
    ]
    corpus.write_text("\n".join(rows) + "\n")

    table = tmp_path / "act.tsv"
    table.write_text(
        "CCCCCCO\t0.50\nCCCCCCN\t0.60\nCCCCCCF\t0.70\nCCCCCCCO\t0.95\n"
        "CCCCCC\t0.30\nCCCCCNC\t0.45\nCCCCCCCN\t0.65\nCCCCCCS\t0.40\n"
    )
    objective = tmp_path / "act.yaml"
    objective.write_text(
        "name: act\n"
        "gamma: 0.4\n"
        "budget: 60\n"
        "oracles:\n"
        "  - {name: act, kind: table, path: act.tsv, direction: 1, default: 0.0}\n"
        "terms:\n"
        "  - oracle: act\n"
        "    success: {comparator: '>=', threshold: 0.9}\n"
    )
    leads = tmp_path / "leads.smi"
    leads.write_text("\n".join(LEADS) + "\n")
    return tmp_path


def run_cli(capsys, *argv):
    code = main([str(a) for a in argv])
    captured = capsys.readouterr()
    return code, captured.out, captured.err


class TestBuildBankAndRetrieve:
    def test_build_bank(self, workspace, capsys):
        code, out, err = run_cli(
            capsys, "build-bank", "--corpus", workspace / "corpus.smi",
            "--out", workspace / "bank",
        )
        assert code == 0, err
        payload = json.loads(out)
        assert payload["records"] == 5
        assert (workspace / "bank.bank.jsonl").exists()
        assert (workspace / "bank.fp.bin").exists()

    def test_retrieve_prints_hint_block(self, workspace, capsys):
        run_cli(capsys, "build-bank", "--corpus", workspace / "corpus.smi",
                "--out", workspace / "bank")
        code, out, err = run_cli(
            capsys, "retrieve", "--bank", workspace / "bank",
            "--query", "CCCCCCO", "--lead", "CCCCCCO",
            "--objective", workspace / "act.yaml",
        )
        assert code == 0, err
        assert out.splitlines()[0] == (
            "=== SIMILAR HIGH-SCORING MOLECULES FOR REFERENCE ==="
        )
        assert "Learn from structural patterns, but do not copy directly." in out

    def test_retrieve_bad_smiles_error_json(self, workspace, capsys):
        run_cli(capsys, "build-bank", "--corpus", workspace / "corpus.smi",
                "--out", workspace / "bank")
        code, out, err = run_cli(
            capsys, "retrieve", "--bank", workspace / "bank",
            "--query", "C1CC", "--lead", "CCCCCCO",
            "--objective", workspace / "act.yaml",
        )
        assert code == 1
        payload = json.loads(err)
        assert payload["error"] == "UnmatchedRingError"


class TestRunEvalSkills:
    def run_once(self, workspace, capsys, out_name="out", seed="7"):
        return run_cli(
            capsys, "run",
            "--leads", workspace / "leads.smi",
            "--objective", workspace / "act.yaml",
            "--out", workspace / out_name,
            "--policy", "random",
            "--budget", "40", "--generations", "2", "--rollouts", "3",
            "--turns", "3", "--seed", seed,
        )

    def test_run_writes_report_and_trajectories(self, workspace, capsys):
        code, out, err = self.run_once(workspace, capsys)
        assert code == 0, err
        assert (workspace / "out" / "report.json").exists()
        assert (workspace / "out" / "report.tsv").exists()
        assert (workspace / "out" / "trajectories.jsonl").exists()
        assert out.startswith("task\tSR(%)\tSim\tRI")

    def test_run_deterministic_bytes(self, workspace, capsys):
        self.run_once(workspace, capsys, out_name="a", seed="7")
        self.run_once(workspace, capsys, out_name="b", seed="7")
        for name in ("report.json", "report.tsv", "trajectories.jsonl"):
            assert (workspace / "a" / name).read_bytes() == \
                (workspace / "b" / name).read_bytes()

    def test_eval_recomputes_aggregates(self, workspace, capsys):
        self.run_once(workspace, capsys)
        code, out, err = run_cli(capsys, "eval", "--report", workspace / "out")
        assert code == 0, err
        payload = json.loads(out)
        assert payload["leads"] == len(LEADS)
        assert all(v == 0.0 for v in payload["recomputation_drift"].values())

    def test_eval_empty_report_fails(self, workspace, capsys):
        bad = workspace / "empty.json"
        bad.write_text(json.dumps({"leads": [], "aggregates": {}}))
        code, out, err = run_cli(capsys, "eval", "--report", bad)
        assert code == 1
        assert "no leads" in json.loads(err)["message"]

    def test_skills_harvest_and_list(self, workspace, capsys):
        # hand-built trajectory with one clear improvement
        lead = parse("CCCCCCO").canonical
        rows = [
            {"trajectory": 0, "lead": lead, "lead_score": 0.5, "turn": 1,
             "action": "CCCCCCF", "reward": 1.0, "score": 0.7, "valid": True,
             "injected_source": None, "terminal_reason": "max_turns"},
        ]
        trajs = workspace / "trajs.jsonl"
        trajs.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
        bank_path = workspace / "skills.jsonl"
        code, out, err = run_cli(
            capsys, "skills", "harvest", "--trajectories", trajs,
            "--objective", workspace / "act.yaml", "--bank", bank_path,
        )
        assert code == 0, err
        payload = json.loads(out)
        assert payload["cards"] == 1 and payload["inserted"] == 1

        code, out, err = run_cli(capsys, "skills", "list", "--bank", bank_path)
        assert code == 0
        entry = json.loads(out.splitlines()[0])
        assert entry["task"] == "act"
        assert entry["text"].endswith(".")

    def test_skills_evict_report(self, workspace, capsys):
        lead = parse("CCCCCCO").canonical
        rows = [
            {"trajectory": 0, "lead": lead, "lead_score": 0.5, "turn": 1,
             "action": "CCCCCCF", "reward": 1.0, "score": 0.7, "valid": True,
             "injected_source": None, "terminal_reason": "max_turns"},
            {"trajectory": 1, "lead": lead, "lead_score": 0.5, "turn": 1,
             "action": "CCCCCCN", "reward": 0.5, "score": 0.6, "valid": True,
             "injected_source": None, "terminal_reason": "max_turns"},
        ]
        trajs = workspace / "trajs.jsonl"
        trajs.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
        bank_path = workspace / "skills.jsonl"
        run_cli(capsys, "skills", "harvest", "--trajectories", trajs,
                "--objective", workspace / "act.yaml", "--bank", bank_path)
        code, out, err = run_cli(
            capsys, "skills", "evict-report", "--bank", bank_path,
            "--capacity", "1",
        )
        assert code == 0, err
        summary = json.loads(out)
        assert summary["act"]["cards"] == 2
        assert summary["act"]["retained"] == 1
        assert len(summary["act"]["evicted"]) == 1


class TestCredit:
    def test_gae_csv(self, capsys):
        code, out, err = run_cli(
            capsys, "credit", "gae", "--rewards", "0,1", "--values", "0,0,0",
            "--gamma", "0.99", "--lambda", "0.95",
        )
        assert code == 0, err
        values = [float(x) for x in out.strip().split(",")]
        assert values == pytest.approx([0.9405, 1.0], abs=1e-12)

    def test_gae_length_error(self, capsys):
        code, out, err = run_cli(
            capsys, "credit", "gae", "--rewards", "0,1", "--values", "0,0",
        )
        assert code == 1
        assert json.loads(err)["error"] == "LengthMismatchError"


class TestHelp:
    @pytest.mark.parametrize("command", [
        ["run"], ["retrieve"], ["skills", "harvest"], ["credit", "gae"],
    ])
    def test_help_lists_defaults(self, command, capsys):
        with pytest.raises(SystemExit) as excinfo:
            main(command + ["--help"])
        assert excinfo.value.code == 0
        out = capsys.readouterr().out
        assert "default" in out

    @pytest.mark.parametrize("command", [["build-bank"], ["eval"]])
    def test_help_exits_clean(self, command, capsys):
        with pytest.raises(SystemExit) as excinfo:
            main(command + ["--help"])
        assert excinfo.value.code == 0

    def test_run_help_shows_table_defaults(self, capsys):
        with pytest.raises(SystemExit):
            main(["run", "--help"])
        out = capsys.readouterr().out
        for token in ["500", "0.4", "5", "20", "32", "0.9", "0.1", "2.0", "1000"]:
            assert token in out
