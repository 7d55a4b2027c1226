"""Umbrella command line. Every subcommand is a thin client over the service
API: by default an in-process app instance (no network), or a remote service
via --server.

Exit codes: 0 ok, 2 config error, 3 unrecoverable divergence, 4 missing
external dependency.
"""
from __future__ import annotations

import json
import shlex
import sys
import time
from pathlib import Path

import click

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGENCE = 3
EXIT_DEPENDENCY = 4


class ServiceClient:
    """Uniform .get/.post over a remote server or an in-process app."""

    def __init__(self, server: str | None):
        if server:
            import httpx

            self._client = httpx.Client(base_url=server, timeout=120.0)
        else:
            import warnings

            with warnings.catch_warnings():
                # starlette's bundled test client warns about its own httpx pin
                warnings.simplefilter("ignore")
                from fastapi.testclient import TestClient

            from .service import create_app

            self._client = TestClient(create_app())

    def get(self, path: str, **kw):
        return self._client.get(path, **kw)

    def post(self, path: str, payload: dict):
        return self._client.post(path, json=payload)


def _fail_from_response(resp) -> None:
    detail = {}
    try:
        detail = resp.json().get("detail", {})
    except Exception:
        pass
    message = detail.get("error") if isinstance(detail, dict) else str(detail)
    code = detail.get("exit_code", EXIT_CONFIG) if isinstance(detail, dict) else EXIT_CONFIG
    click.echo(f"error: {message or resp.text}", err=True)
    sys.exit(code)


def _ok(resp) -> dict:
    if resp.status_code >= 400:
        _fail_from_response(resp)
    return resp.json()


@click.group()
@click.option("--server", default=None, envvar="DESKLM_SERVER",
              help="Service URL; default runs the service in-process.")
@click.pass_context
def main(ctx, server):
    """Desk-scale LM training lifecycle: curate, train, evaluate, account."""
    ctx.obj = ServiceClient(server)


def _run_and_watch(client: ServiceClient, payload: dict, poll: float, watch: bool) -> None:
    run_id = _ok(client.post("/runs", payload))["run_id"]
    click.echo(f"run {run_id} started")
    last_printed = 0
    while True:
        status = _ok(client.get(f"/runs/{run_id}"))
        step = status["step"]
        if watch and status["last_step"] and step > last_printed:
            s = status["last_step"]
            val = f" val {s['val_loss']:.4f}" if s.get("val_loss") is not None else ""
            click.echo(
                f"step {s['step']:>6}  loss {s['loss']:.4f}  lr {s['lr']:.3e}  "
                f"scale {s['scale']:.3g}{val}"
            )
            last_printed = step
        if status["state"] != "running":
            break
        time.sleep(poll)
    click.echo(f"run {run_id}: {status['state']} at step {status['step']} "
               f"({status['restarts']} restarts)")
    if status["error"]:
        click.echo(f"error: {status['error']}", err=True)
    sys.exit(status["exit_code"])


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--run-dir", required=True, type=click.Path())
@click.option("--poll", default=0.5, show_default=True, help="Status poll interval (s).")
@click.option("--watch/--no-watch", default=True, show_default=True)
@click.pass_obj
def train(client, config_path, run_dir, poll, watch):
    """Train to the configured token budget."""
    _run_and_watch(client, {"config_path": str(Path(config_path).resolve()),
                            "run_dir": str(Path(run_dir).resolve())}, poll, watch)


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--run-dir", required=True, type=click.Path())
@click.option("--from", "from_ckpt", required=True, type=click.Path(exists=True),
              help="Checkpoint to resume from.")
@click.option("--poll", default=0.5, show_default=True)
@click.option("--watch/--no-watch", default=True, show_default=True)
@click.pass_obj
def resume(client, config_path, run_dir, from_ckpt, poll, watch):
    """Resume a run from a checkpoint."""
    _run_and_watch(client, {"config_path": str(Path(config_path).resolve()),
                            "run_dir": str(Path(run_dir).resolve()),
                            "resume_from": str(Path(from_ckpt).resolve())}, poll, watch)


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--run-dir", required=True, type=click.Path())
@click.option("--schedule", "schedule_path", required=True, type=click.Path(exists=True),
              help="Fault schedule: JSON list of {step, kind, factor}.")
@click.option("--poll", default=0.5, show_default=True)
@click.option("--watch/--no-watch", default=True, show_default=True)
@click.pass_obj
def inject(client, config_path, run_dir, schedule_path, poll, watch):
    """Train under an injected fault schedule (crash, nan-grad, scaler-reset,
    grad-bomb)."""
    faults = json.loads(Path(schedule_path).read_text())
    _run_and_watch(client, {"config_path": str(Path(config_path).resolve()),
                            "run_dir": str(Path(run_dir).resolve()),
                            "faults": faults}, poll, watch)


@main.command()
@click.argument("run_id")
@click.argument("command", type=click.Choice(
    ["set-lr-factor", "set-clip", "reset-scaler", "checkpoint-now", "stop"]))
@click.option("--factor", type=float, default=None)
@click.option("--max-norm", type=float, default=None)
@click.pass_obj
def control(client, run_id, command, factor, max_norm):
    """Queue a mid-flight command for a running job (applied at the next step
    boundary)."""
    payload = {"command": command}
    if factor is not None:
        payload["factor"] = factor
    if max_norm is not None:
        payload["max_norm"] = max_norm
    out = _ok(client.post(f"/runs/{run_id}/control", payload))
    click.echo(f"queued {out['command']} for run {out['run_id']}")


@main.command()
@click.option("--manifest", required=True, type=click.Path(exists=True))
@click.option("--output", type=click.Path(), default=None,
              help="Write kept documents (length-prefixed records).")
@click.option("--report", type=click.Path(), default=None,
              help="Write one JSON removal record per line.")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None,
              help="Run config supplying the dedup section.")
@click.option("--exact-verify", is_flag=True, default=False)
@click.pass_obj
def dedup(client, manifest, output, report, config_path, exact_verify):
    """Remove near-duplicate documents via MinHashLSH."""
    payload = {"manifest_path": str(Path(manifest).resolve()), "exact_verify": exact_verify}
    if output:
        payload["output_path"] = str(Path(output).resolve())
    if report:
        payload["report_path"] = str(Path(report).resolve())
    if config_path:
        from .config import parse_config

        d = parse_config(config_path).dedup
        payload.update(
            jaccard_threshold=d.jaccard_threshold, shingle_width=d.shingle_width,
            num_hashes=d.num_hashes, bands=d.bands, seed=d.seed,
        )
    out = _ok(client.post("/corpus/dedup", payload))
    click.echo(f"{out['documents']} documents: kept {out['kept']}, "
               f"removed {out['removed']}, short {out['short']}")


@main.command("flatten-threads")
@click.option("--input", "input_path", required=True, type=click.Path(exists=True))
@click.option("--output", required=True, type=click.Path())
@click.pass_obj
def flatten_threads(client, input_path, output):
    """Flatten comment trees to their longest root-to-leaf chains."""
    out = _ok(client.post("/corpus/flatten-threads", {
        "input_path": str(Path(input_path).resolve()),
        "output_path": str(Path(output).resolve()),
    }))
    pct = 100.0 * (1 - out["kept_comments"] / out["input_comments"]) if out["input_comments"] else 0.0
    click.echo(f"{out['threads']} threads -> {out['documents']} documents "
               f"({out['kept_comments']}/{out['input_comments']} comments kept, "
               f"{pct:.0f}% discarded)")


@main.command("train-bpe")
@click.option("--manifest", type=click.Path(exists=True), default=None)
@click.option("--input", "input_path", type=click.Path(exists=True), default=None)
@click.option("--vocab-size", required=True, type=int)
@click.option("--output", required=True, type=click.Path())
@click.pass_obj
def train_bpe(client, manifest, input_path, vocab_size, output):
    """Learn a byte-level BPE vocabulary."""
    payload = {"vocab_size": vocab_size, "output_path": str(Path(output).resolve())}
    if manifest:
        payload["manifest_path"] = str(Path(manifest).resolve())
    if input_path:
        payload["input_path"] = str(Path(input_path).resolve())
    out = _ok(client.post("/corpus/train-bpe", payload))
    click.echo(f"vocab size {out['vocab_size']} ({out['merges']} merges) -> {out['output_path']}")


@main.command()
@click.option("--manifest", type=click.Path(exists=True), default=None)
@click.option("--input", "input_path", type=click.Path(exists=True), default=None)
@click.option("--vocab", required=True, type=click.Path(exists=True))
@click.option("--output", required=True, type=click.Path())
@click.pass_obj
def tokenize(client, manifest, input_path, vocab, output):
    """Tokenize documents into a flat id stream (.npy) for training."""
    payload = {"vocab_path": str(Path(vocab).resolve()), "output_path": str(Path(output).resolve())}
    if manifest:
        payload["manifest_path"] = str(Path(manifest).resolve())
    if input_path:
        payload["input_path"] = str(Path(input_path).resolve())
    out = _ok(client.post("/corpus/tokenize", payload))
    click.echo(f"{out['documents']} documents -> {out['tokens']} tokens -> {out['output_path']}")


@main.command("eval")
@click.option("--task", "task_path", required=True, type=click.Path(exists=True))
@click.option("--shots", default=0, show_default=True, type=int)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--vocab", required=True, type=click.Path(exists=True))
@click.option("--f1", "compute_f1", is_flag=True, default=False,
              help="Also report F1 (accuracy is always reported).")
@click.pass_obj
def eval_cmd(client, task_path, shots, seed, checkpoint, vocab, compute_f1):
    """Few-shot multiple-choice evaluation from a task file."""
    out = _ok(client.post("/eval/task", {
        "task_path": str(Path(task_path).resolve()),
        "checkpoint_path": str(Path(checkpoint).resolve()),
        "vocab_path": str(Path(vocab).resolve()),
        "shots": shots, "seed": seed, "compute_f1": compute_f1,
    }))
    click.echo(json.dumps(out, indent=2))


@main.command("dialogue-eval")
@click.option("--episodes", required=True, type=click.Path(exists=True))
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--vocab", required=True, type=click.Path(exists=True))
@click.option("--reference-vocab", type=click.Path(exists=True), default=None,
              help="Tokenizer defining the normalized-perplexity space.")
@click.option("--max-new-tokens", default=32, show_default=True, type=int)
@click.pass_obj
def dialogue_eval_cmd(client, episodes, checkpoint, vocab, reference_vocab, max_new_tokens):
    """Dialogue evaluation: normalized perplexity and Unigram F1."""
    payload = {
        "episodes_path": str(Path(episodes).resolve()),
        "checkpoint_path": str(Path(checkpoint).resolve()),
        "vocab_path": str(Path(vocab).resolve()),
        "max_new_tokens": max_new_tokens,
    }
    if reference_vocab:
        payload["reference_vocab_path"] = str(Path(reference_vocab).resolve())
    out = _ok(client.post("/eval/dialogue", payload))
    click.echo(json.dumps(out, indent=2))


@main.command("toxicity-eval")
@click.option("--prompts", required=True, type=click.Path(exists=True))
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--vocab", required=True, type=click.Path(exists=True))
@click.option("--classifier", required=True,
              help="http(s) endpoint URL, or a shell command reading text on "
                   "stdin and printing one probability.")
@click.option("--generations", default=25, show_default=True, type=int)
@click.option("--tokens", default=20, show_default=True, type=int)
@click.option("--nucleus-p", default=0.9, show_default=True, type=float)
@click.option("--seed", default=0, show_default=True, type=int)
@click.pass_obj
def toxicity_eval_cmd(client, prompts, checkpoint, vocab, classifier, generations,
                      tokens, nucleus_p, seed):
    """Bucketed toxicity of nucleus-sampled continuations."""
    if classifier.startswith(("http://", "https://")):
        spec = {"kind": "http", "url": classifier}
    else:
        spec = {"kind": "command", "argv": shlex.split(classifier)}
    out = _ok(client.post("/eval/toxicity", {
        "prompts_path": str(Path(prompts).resolve()),
        "checkpoint_path": str(Path(checkpoint).resolve()),
        "vocab_path": str(Path(vocab).resolve()),
        "classifier": spec,
        "generations_per_prompt": generations,
        "tokens_per_generation": tokens,
        "nucleus_p": nucleus_p,
        "seed": seed,
    }))
    click.echo(json.dumps(out, indent=2))


@main.command()
@click.option("--params", "param_count", required=True, type=float, help="Parameter count N.")
@click.option("--tokens", "training_tokens", required=True, type=float, help="Training tokens D.")
@click.option("--devices", default=992, show_default=True, type=int)
@click.option("--throughput", default=147e12, show_default=True, type=float,
              help="Per-device FLOP/s.")
@click.option("--power", default=400.0, show_default=True, type=float, help="Watts per device.")
@click.option("--pue", default=1.1, show_default=True, type=float)
@click.option("--intensity", default=0.4, show_default=True, type=float, help="kgCO2eq/kWh.")
@click.option("--overhead", default=1.0, show_default=True, type=float,
              help="Plain multiplier for ablations/downtime.")
@click.pass_obj
def account(client, param_count, training_tokens, devices, throughput, power, pue,
            intensity, overhead):
    """Compute/carbon estimate with published reference footprints."""
    out = _ok(client.post("/accounting", {
        "param_count": param_count, "training_tokens": training_tokens,
        "device_count": devices, "throughput_flops": throughput,
        "device_power_w": power, "pue": pue,
        "grid_intensity_kg_per_kwh": intensity, "overhead_multiplier": overhead,
    }))
    from .accounting import format_report

    click.echo(format_report(out))


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8461, show_default=True, type=int)
def serve(host, port):
    """Run the service."""
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(), host=host, port=port)


if __name__ == "__main__":
    main()
