"""The service: run lifecycle and mid-flight control for training, plus
synchronous corpus, evaluation, and accounting operations."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException

from .. import __version__
from ..accounting import AccountingInput, accounting_report
from ..bpe import BPEVocab, bpe_encode, bpe_train
from ..checkpoint import load_checkpoint
from ..config import build_config, parse_config
from ..corpus import (
    CommentNode,
    DedupConfig,
    RedditThread,
    dedup_corpus,
    extract_longest_chain,
    load_manifest_documents,
    read_documents,
    write_length_prefixed,
)
from ..errors import CheckpointError, ConfigError, DependencyError, TreeError
from ..evalharness import (
    DialogueEpisode,
    PromptTask,
    ToxicityProtocol,
    TransformerScorer,
    command_classifier,
    dialogue_eval,
    evaluate_task,
    http_classifier,
    make_tokenizer,
    normalized_perplexity,
    toxicity_eval,
)
from ..logbook import read_events
from . import schemas as S
from .runs import RunManager, load_corpus_tokens


def create_app() -> FastAPI:
    app = FastAPI(title="desklm", version=__version__)
    manager = RunManager()
    app.state.manager = manager

    def bad_request(e: Exception, code: int = 2, status: int = 400):
        raise HTTPException(status_code=status, detail={"error": str(e), "exit_code": code})

    @app.get("/health", response_model=S.HealthResponse)
    def health():
        return S.HealthResponse(version=__version__)

    # -- training runs ------------------------------------------------------

    @app.post("/runs", response_model=S.TrainStarted)
    def start_run(req: S.TrainRequest):
        try:
            if (req.config_path is None) == (req.config is None):
                raise ConfigError("provide exactly one of config_path / config")
            if req.config_path is not None:
                config = parse_config(req.config_path)
                base = Path(req.config_path).parent
            else:
                config = build_config(req.config)
                base = None
            corpus = load_corpus_tokens(config, base_dir=base)
            record = manager.start(
                config,
                corpus,
                req.run_dir,
                resume_from=req.resume_from,
                faults=[f.model_dump() for f in req.faults] if req.faults else None,
            )
        except ConfigError as e:
            bad_request(e)
        return S.TrainStarted(run_id=record.run_id)

    @app.get("/runs", response_model=S.RunList)
    def list_runs():
        return S.RunList(runs=[S.RunStatus(**r.status_dict()) for r in manager.list()])

    @app.get("/runs/{run_id}", response_model=S.RunStatus)
    def run_status(run_id: str):
        try:
            record = manager.get(run_id)
        except KeyError:
            raise HTTPException(status_code=404, detail={"error": f"no run {run_id}", "exit_code": 2})
        return S.RunStatus(**record.status_dict())

    @app.get("/runs/{run_id}/logbook", response_model=S.LogbookResponse)
    def run_logbook(run_id: str, tail: int = 0):
        try:
            record = manager.get(run_id)
        except KeyError:
            raise HTTPException(status_code=404, detail={"error": f"no run {run_id}", "exit_code": 2})
        events = read_events(record.run_dir / "logbook.jsonl")
        if tail:
            events = events[-tail:]
        return S.LogbookResponse(events=[{"ts": e.ts, "kind": e.kind, **e.payload} for e in events])

    @app.post("/runs/{run_id}/control", response_model=S.ControlAck)
    def run_control(run_id: str, req: S.ControlRequest):
        command: dict = {"cmd": req.command}
        if req.command == "set-lr-factor":
            if req.factor is None:
                bad_request(ConfigError("set-lr-factor requires 'factor'"))
            command["factor"] = req.factor
        if req.command == "set-clip":
            if req.max_norm is None:
                bad_request(ConfigError("set-clip requires 'max_norm'"))
            command["max_norm"] = req.max_norm
        try:
            manager.queue_control(run_id, command)
        except KeyError:
            raise HTTPException(status_code=404, detail={"error": f"no run {run_id}", "exit_code": 2})
        return S.ControlAck(run_id=run_id, command=req.command)

    # -- corpus operations --------------------------------------------------

    @app.post("/corpus/dedup", response_model=S.DedupResponse)
    def corpus_dedup(req: S.DedupRequest):
        try:
            docs = load_manifest_documents(req.manifest_path)
            cfg = DedupConfig(
                jaccard_threshold=req.jaccard_threshold,
                shingle_width=req.shingle_width,
                num_hashes=req.num_hashes,
                bands=req.bands,
                seed=req.seed,
                exact_verify=req.exact_verify,
            )
            report = dedup_corpus(docs, cfg)
            if req.output_path:
                write_length_prefixed(report.kept, req.output_path)
            if req.report_path:
                Path(req.report_path).write_text(report.to_jsonl() + "\n")
        except (ConfigError, OSError) as e:
            bad_request(e)
        return S.DedupResponse(
            documents=len(docs),
            kept=len(report.kept),
            removed=len(report.removals),
            short=len(report.short_ids),
            removals=[
                {"removed_id": r.removed_id, "kept_id": r.kept_id, "estimate": r.estimate}
                for r in report.removals
            ],
        )

    @app.post("/corpus/flatten-threads", response_model=S.FlattenResponse)
    def corpus_flatten(req: S.FlattenRequest):
        try:
            raw = json.loads(Path(req.input_path).read_text())
            docs = []
            total_comments = 0
            kept_comments = 0
            for row in raw:
                nodes = [CommentNode(**n) for n in row["nodes"]]
                total_comments += len(nodes)
                doc = extract_longest_chain(RedditThread(nodes=nodes))
                kept_comments += doc.text.count("\n") + 1
                docs.append(doc)
            with open(req.output_path, "w") as f:
                for doc in docs:
                    f.write(json.dumps({"id": doc.id, "source": doc.source, "text": doc.text}) + "\n")
        except (TreeError, ConfigError, OSError, KeyError, json.JSONDecodeError) as e:
            bad_request(e)
        return S.FlattenResponse(
            threads=len(raw),
            documents=len(docs),
            input_comments=total_comments,
            kept_comments=kept_comments,
        )

    def _gather_docs(manifest_path: str | None, input_path: str | None):
        if (manifest_path is None) == (input_path is None):
            raise ConfigError("provide exactly one of manifest_path / input_path")
        if manifest_path is not None:
            return load_manifest_documents(manifest_path)
        return read_documents(input_path, source="input", fmt="lines")

    @app.post("/corpus/train-bpe", response_model=S.TrainBpeResponse)
    def corpus_train_bpe(req: S.TrainBpeRequest):
        try:
            docs = _gather_docs(req.manifest_path, req.input_path)
            vocab = bpe_train([d.text for d in docs], req.vocab_size)
            vocab.save(req.output_path)
        except (ConfigError, ValueError, OSError) as e:
            bad_request(e)
        return S.TrainBpeResponse(
            vocab_size=vocab.size, merges=len(vocab.merges), output_path=req.output_path
        )

    @app.post("/corpus/tokenize", response_model=S.TokenizeResponse)
    def corpus_tokenize(req: S.TokenizeRequest):
        try:
            docs = _gather_docs(req.manifest_path, req.input_path)
            vocab = BPEVocab.load(req.vocab_path)
            stream: list[int] = []
            for d in docs:
                stream.extend(bpe_encode(vocab, d.text))
                stream.append(vocab.eot_id)
            arr = np.asarray(stream, dtype=np.uint32)
            np.save(req.output_path, arr)
        except (ConfigError, OSError, KeyError) as e:
            bad_request(e)
        return S.TokenizeResponse(documents=len(docs), tokens=int(arr.size), output_path=req.output_path)

    # -- evaluation ---------------------------------------------------------

    def _load_scorer(checkpoint_path: str, vocab_path: str):
        try:
            ckpt = load_checkpoint(checkpoint_path)
            vocab = BPEVocab.load(vocab_path)
        except (CheckpointError, OSError, json.JSONDecodeError) as e:
            raise ConfigError(str(e)) from e
        if vocab.size > ckpt.config.vocab_size:
            raise ConfigError(
                f"vocab size {vocab.size} exceeds model vocab {ckpt.config.vocab_size}"
            )
        tokenizer = make_tokenizer(vocab)
        tokenizer.vocab = vocab
        return TransformerScorer(ckpt.state.params, ckpt.config), tokenizer

    @app.post("/eval/task", response_model=S.MetricReportResponse)
    def eval_task(req: S.EvalRequest):
        try:
            model, tokenizer = _load_scorer(req.checkpoint_path, req.vocab_path)
            task = PromptTask.from_file(req.task_path)
            report = evaluate_task(
                model, tokenizer, task, shots=req.shots, seed=req.seed, compute_f1=req.compute_f1
            )
        except ConfigError as e:
            bad_request(e)
        return S.MetricReportResponse(**report.to_dict())

    @app.post("/eval/dialogue", response_model=S.DialogueEvalResponse)
    def eval_dialogue(req: S.DialogueEvalRequest):
        try:
            model, tokenizer = _load_scorer(req.checkpoint_path, req.vocab_path)
            if req.reference_vocab_path:
                ref_vocab = BPEVocab.load(req.reference_vocab_path)
                ref_tokenizer = make_tokenizer(ref_vocab)
            else:
                ref_tokenizer = tokenizer
            episodes = [
                DialogueEpisode(turns=turns)
                for turns in json.loads(Path(req.episodes_path).read_text())
            ]
            total_nll = 0.0
            ref_tokens = 0
            model_tokens = 0
            uf1s = []
            for ep in episodes:
                r = dialogue_eval(model, tokenizer, ref_tokenizer, ep, req.max_new_tokens)
                total_nll += r.total_nll
                ref_tokens += r.reference_token_count
                model_tokens += r.model_token_count
                uf1s.extend(r.per_turn_uf1)
        except (ConfigError, OSError, json.JSONDecodeError) as e:
            bad_request(e)
        import math

        return S.DialogueEvalResponse(
            episodes=len(episodes),
            normalized_ppl=normalized_perplexity(total_nll, ref_tokens),
            native_ppl=math.exp(total_nll / model_tokens),
            uf1=float(np.mean(uf1s)),
        )

    @app.post("/eval/toxicity", response_model=S.ToxicityEvalResponse)
    def eval_toxicity(req: S.ToxicityEvalRequest):
        spec = req.classifier
        if spec.kind == "http":
            if not spec.url:
                bad_request(ConfigError("http classifier requires url"))
            classifier = http_classifier(spec.url)
        elif spec.kind == "command":
            if not spec.argv:
                bad_request(ConfigError("command classifier requires argv"))
            classifier = command_classifier(spec.argv)
        else:
            if spec.value is None:
                bad_request(ConfigError("constant classifier requires value"))
            classifier = lambda text: spec.value
        try:
            model, tokenizer = _load_scorer(req.checkpoint_path, req.vocab_path)
            prompts = [
                (row[0], float(row[1]))
                for row in json.loads(Path(req.prompts_path).read_text())
            ]
            protocol = ToxicityProtocol(
                prompts=prompts,
                generations_per_prompt=req.generations_per_prompt,
                tokens_per_generation=req.tokens_per_generation,
                nucleus_p=req.nucleus_p,
                bucket_edges=tuple(req.bucket_edges),
                seed=req.seed,
            )
            result = toxicity_eval(model, tokenizer, protocol, classifier)
        except DependencyError as e:
            bad_request(e, code=4, status=424)
        except (ConfigError, OSError, json.JSONDecodeError) as e:
            bad_request(e)
        return S.ToxicityEvalResponse(**result)

    # -- accounting ---------------------------------------------------------

    @app.post("/accounting", response_model=S.AccountingResponse)
    def accounting(req: S.AccountingRequest):
        try:
            inp = AccountingInput(**req.model_dump())
        except ConfigError as e:
            bad_request(e)
        return S.AccountingResponse(**accounting_report(inp))

    return app
