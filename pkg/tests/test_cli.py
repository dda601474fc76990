"""Command line: run, inspect, vectors. Exit codes and output shapes."""

import hashlib
import json
import pathlib

import pytest

from ivtp import cli, identity, ledger, scenario, sim

ROOT = pathlib.Path(__file__).resolve().parent.parent
SCENARIOS = ROOT / "scenarios"


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    """One intersection run persisted to disk, shared by inspect tests."""
    out = tmp_path_factory.mktemp("run")
    cfg = scenario.load_scenario(SCENARIOS / "intersection_table2.json")
    handles = sim.run(cfg, out_dir=out)
    return out, handles


class TestRunCommand:
    def test_run_prints_outcome_and_writes_artifacts(self, tmp_path, capsys):
        rc = cli.main(
            [
                "run",
                "--scenario",
                str(SCENARIOS / "intersection_table2.json"),
                "--out",
                str(tmp_path),
            ]
        )
        out = capsys.readouterr().out
        assert rc == 0
        assert "crossing-1: committed [IV-1 -> IV-2 -> IV-3 -> IV-4]" in out
        assert "proposer IV-3" in out
        assert "reward 500 milli-trust IV-1 -> IV-3" in out
        assert "trace digest" in out
        for fname in ("chain.bin", "trace.jsonl", "report.json"):
            assert (tmp_path / fname).exists()

    def test_missing_scenario_is_usage_error(self, capsys):
        assert cli.main(["run", "--scenario", "/nonexistent.json"]) == 2
        assert "not found" in capsys.readouterr().err

    def test_unparseable_scenario_fails(self, tmp_path, capsys):
        p = tmp_path / "bad.json"
        p.write_text("{nope")
        assert cli.main(["run", "--scenario", str(p)]) == 1
        assert "bad scenario" in capsys.readouterr().err

    def test_invalid_schema_fails(self, tmp_path, capsys):
        p = tmp_path / "empty.json"
        p.write_text('{"vehicles": []}')
        assert cli.main(["run", "--scenario", str(p)]) == 1
        assert "vehicles" in capsys.readouterr().err


class TestInspectValidate:
    def test_fresh_chain_validates(self, run_dir, capsys):
        out_dir, _ = run_dir
        rc = cli.main(["inspect", str(out_dir / "chain.bin"), "validate"])
        out = capsys.readouterr().out
        assert rc == 0
        assert out.startswith("ok:")

    def test_tampered_block_names_the_height(self, run_dir, tmp_path, capsys):
        """Flip one signature byte inside block 2 and rebuild the file
        checksum: replay must point at block 2 exactly."""
        out_dir, handles = run_dir
        blocks = list(handles.chain.blocks)
        import dataclasses

        victim = blocks[2]
        tx = victim.txs[0]
        forged_tx = dataclasses.replace(
            tx, signature=bytes([tx.signature[0] ^ 1]) + tx.signature[1:]
        )
        blocks[2] = dataclasses.replace(victim, txs=(forged_tx,) + victim.txs[1:])
        body = b"".join(
            [ledger.CHAIN_MAGIC, bytes([ledger.CHAIN_VERSION]),
             ledger._u64(handles.chain.state.endowment)]
            + [ledger._blob(ledger.encode_block(b)) for b in blocks]
        )
        path = tmp_path / "tampered.bin"
        path.write_bytes(body + hashlib.sha256(body).digest())

        rc = cli.main(["inspect", str(path), "validate"])
        out = capsys.readouterr().out
        assert rc == 1
        assert out.startswith("INVALID:")
        assert "block 2" in out

    def test_header_tamper_caught_by_checksum(self, run_dir, tmp_path, capsys):
        """The endowment header is not covered by any block hash; the
        whole-file checksum is what catches it."""
        out_dir, _ = run_dir
        data = bytearray((out_dir / "chain.bin").read_bytes())
        data[12] ^= 0x01  # endowment low byte
        path = tmp_path / "header.bin"
        path.write_bytes(bytes(data))
        rc = cli.main(["inspect", str(path), "validate"])
        out = capsys.readouterr().out
        assert rc == 1
        assert "checksum" in out

    def test_truncated_file_is_corrupt(self, run_dir, tmp_path, capsys):
        out_dir, _ = run_dir
        data = (out_dir / "chain.bin").read_bytes()
        path = tmp_path / "trunc.bin"
        path.write_bytes(data[: len(data) // 2])
        assert cli.main(["inspect", str(path), "validate"]) == 1

    def test_missing_file(self, capsys):
        assert cli.main(["inspect", "/nonexistent.bin", "validate"]) == 2


class TestInspectQueries:
    def test_comm_table_lists_scripted_peers(self, run_dir, capsys):
        out_dir, handles = run_dir
        rc = cli.main(["inspect", str(out_dir / "chain.bin"), "comm-table"])
        assert rc == 0
        table = json.loads(capsys.readouterr().out)
        by_alias = {v: k for k, v in handles.aliases.items()}
        for alias in ("IV-1", "IV-2", "IV-3", "IV-4"):
            veh = by_alias[alias].hex()
            others = {
                by_alias[a].hex()
                for a in ("IV-1", "IV-2", "IV-3", "IV-4")
                if a != alias
            }
            assert set(table[veh]) == others

    def test_balance_accepts_hex_prefix(self, run_dir, capsys):
        out_dir, handles = run_dir
        by_alias = {v: k for k, v in handles.aliases.items()}
        prefix = by_alias["IV-3"].hex()[:10]
        rc = cli.main(["inspect", str(out_dir / "chain.bin"), "balance", prefix])
        assert rc == 0
        body = json.loads(capsys.readouterr().out)
        assert body == {"vehicle": by_alias["IV-3"].hex(), "balance": 100_500}

    def test_history_lists_lifecycle(self, run_dir, capsys):
        out_dir, handles = run_dir
        by_alias = {v: k for k, v in handles.aliases.items()}
        rc = cli.main(
            ["inspect", str(out_dir / "chain.bin"), "history", by_alias["IV-1"].hex()]
        )
        assert rc == 0
        body = json.loads(capsys.readouterr().out)
        kinds = [row["kind"] for row in body["history"]]
        assert kinds == [
            "RegisterTx", "CommTx", "CommTx", "CommTx", "CommTx",
            "ArbitrationTx", "RewardTx",
        ]

    def test_unknown_vehicle(self, run_dir, capsys):
        out_dir, _ = run_dir
        rc = cli.main(["inspect", str(out_dir / "chain.bin"), "balance", "ffff"])
        assert rc == 1
        assert "unknown vehicle" in capsys.readouterr().err

    def test_balance_requires_vehicle_argument(self, run_dir, capsys):
        out_dir, _ = run_dir
        assert cli.main(["inspect", str(out_dir / "chain.bin"), "balance"]) == 2

    def test_queries_refuse_corrupt_chains(self, run_dir, tmp_path, capsys):
        out_dir, _ = run_dir
        data = bytearray((out_dir / "chain.bin").read_bytes())
        data[12] ^= 0x01
        path = tmp_path / "bad.bin"
        path.write_bytes(bytes(data))
        assert cli.main(["inspect", str(path), "comm-table"]) == 1


class TestVectors:
    def test_matches_frozen_oracle_files(self, capsys):
        """The CLI's golden vectors must equal the values produced by an
        independent hashlib/Ed25519 derivation, frozen in vectors/."""
        assert cli.main(["vectors"]) == 0
        got = json.loads(capsys.readouterr().out)
        frozen_identity = json.loads((ROOT / "vectors" / "identity.json").read_text())
        frozen_merkle = json.loads((ROOT / "vectors" / "merkle.json").read_text())
        assert got["dealer"] == frozen_identity["dealer"]
        assert got["identity"] == frozen_identity["identity"]
        assert got["merkle"] == frozen_merkle["merkle"]


class TestUsage:
    def test_no_arguments(self, capsys):
        assert cli.main([]) == 2

    def test_unknown_command(self, capsys):
        assert cli.main(["frobnicate"]) == 2

    def test_console_script_entrypoint(self):
        """Installed entry point resolves to the same main."""
        from importlib.metadata import entry_points

        (ep,) = entry_points(group="console_scripts", name="ivtp")
        assert ep.load() is cli.main
