"""Command-line entry points.

`fedbot` exposes subcommands for every stage: prepare silos from a raw
CSV, train a central baseline, run the combiner, join as a client, add
feedback pairs to a silo, evaluate a saved model, and serve or use the
chat interface. `combiner` and `client` are shorthands for the matching
subcommands.

Exit codes: 0 success, 1 usage or generic failure, 2 data problems,
3 protocol violations or lost connections, 4 numeric failures.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import threading
import time

from .chat import ChatService, serve_chat
from .client import FederatedClient, LocalTrainConfig, client_update, local_evaluate, run_client
from .combiner import MERGE_MODES, METRICS_COLUMNS, CombinerServer, metrics_row
from .data import (
    build_silos,
    encode_pairs,
    load_pairs_csv,
    load_silo,
    partition_by_brand,
    partition_pairs,
)
from .errors import DataError, Disconnected, FedbotError, NumericError, ProtocolError
from .kvconfig import load_kv, save_kv
from .model import TransformerConfig, count_parameters, greedy_decode, init_weights
from .protocol import deserialize_weights, serialize_weights
from .tokenizer import Vocabulary, decode, encode, normalize, train_vocab

log = logging.getLogger(__name__)

DEFAULT_PORT = int(os.environ.get("FEDBOT_PORT", "7177"))
DEFAULT_HTTP_PORT = int(os.environ.get("FEDBOT_HTTP_PORT", "8080"))


def save_model(path: str, weights, config: TransformerConfig) -> None:
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(serialize_weights(weights))
    os.replace(tmp, path)
    save_kv(path + ".kv", config.to_dict())


def load_model(path: str):
    with open(path, "rb") as fh:
        weights = deserialize_weights(fh.read())
    config = TransformerConfig.from_dict(load_kv(path + ".kv"))
    return weights, config


def _add_model_args(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("model")
    group.add_argument("--d-model", type=int, default=256)
    group.add_argument("--n-heads", type=int, default=8)
    group.add_argument("--n-layers", type=int, default=4)
    group.add_argument("--d-ff", type=int, default=512)
    group.add_argument("--max-len", type=int, default=30)
    group.add_argument("--dropout", type=float, default=0.2)


def _config_from_args(args, vocab_size: int) -> TransformerConfig:
    return TransformerConfig(
        vocab_size=vocab_size,
        d_model=args.d_model,
        n_heads=args.n_heads,
        n_layers=args.n_layers,
        d_ff=args.d_ff,
        max_len=args.max_len,
        dropout=args.dropout,
        attention_dropout=args.dropout,
        activation_dropout=args.dropout,
    )


def _add_train_args(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("training")
    group.add_argument("--epochs", type=int, default=10)
    group.add_argument("--lr", type=float, default=0.001)
    group.add_argument("--batch-size", type=int, default=32)
    group.add_argument("--optimizer", choices=("sgd", "adam"), default="sgd")
    group.add_argument("--use-dropout", action="store_true")
    group.add_argument("--seed", type=int, default=0)


# -- subcommands ----------------------------------------------------------------


def cmd_prepare(args) -> int:
    result = load_pairs_csv(args.csv, limit=args.limit)
    if not result.pairs:
        raise DataError(f"{args.csv}: no usable conversation pairs")
    print(f"extracted {len(result.pairs)} pairs ({result.skipped} rows skipped)")
    corpus = []
    for pair in result.pairs:
        corpus.append(pair.query)
        corpus.append(pair.response)
    vocab = train_vocab(corpus, vocab_size=args.vocab_size, min_freq=args.min_freq)
    print(f"vocabulary: {len(vocab)} pieces")
    if args.by_brand:
        named = partition_by_brand(result.pairs)
        brands = [b for b, _ in named]
        shards = [s for _, s in named]
    else:
        brands = None
        shards = partition_pairs(result.pairs, args.clients, args.seed)
    os.makedirs(args.out, exist_ok=True)
    dirs = build_silos(args.out, shards, vocab, args.seed, args.val_fraction, brands)
    save_kv(os.path.join(args.out, "manifest.txt"), {
        "n_pairs": len(result.pairs),
        "skipped": result.skipped,
        "n_clients": len(dirs),
        "vocab_size": len(vocab),
        "seed": args.seed,
        "val_fraction": args.val_fraction,
        "source": os.path.basename(args.csv),
    })
    for path in dirs:
        print(f"wrote {path}")
    return 0


def cmd_train_central(args) -> int:
    silo = load_silo(args.silo)
    config = _config_from_args(args, len(silo.vocab))
    print(f"model: {count_parameters(config)} parameters")
    weights = init_weights(config, seed=args.seed)
    src, tgt = encode_pairs(silo.vocab, silo.train, config.max_len)
    train_cfg = LocalTrainConfig(
        epochs=args.epochs, lr=args.lr, batch_size=args.batch_size,
        optimizer=args.optimizer, shuffle_seed=args.seed, use_dropout=args.use_dropout,
    )

    def on_epoch(epoch, loss, acc):
        print(f"epoch {epoch + 1}/{args.epochs}  loss={loss:.4f}  acc={acc:.2f}%")

    start = time.monotonic()
    weights, train_loss, train_acc = client_update(
        weights, config, src, tgt, train_cfg, on_epoch=on_epoch
    )
    elapsed = time.monotonic() - start
    val_loss, val_acc = 0.0, 0.0
    if silo.val:
        vsrc, vtgt = encode_pairs(silo.vocab, silo.val, config.max_len)
        val_loss, val_acc = local_evaluate(weights, config, vsrc, vtgt)
        print(f"validation  loss={val_loss:.4f}  acc={val_acc:.2f}%")
    save_model(args.out, weights, config)
    save_kv(args.out + ".run", {
        "silo": args.silo, "epochs": args.epochs, "lr": args.lr,
        "batch_size": args.batch_size, "optimizer": args.optimizer,
        "seed": args.seed, "elapsed_s": f"{elapsed:.1f}",
        "train_loss": f"{train_loss:.6f}", "train_acc": f"{train_acc:.4f}",
        "val_loss": f"{val_loss:.6f}", "val_acc": f"{val_acc:.4f}",
    })
    print(f"saved model to {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    weights, config = load_model(args.model)
    silo = load_silo(args.silo)
    if len(silo.vocab) != config.vocab_size:
        raise DataError(
            f"vocabulary size {len(silo.vocab)} does not match model ({config.vocab_size})"
        )
    pairs = silo.val if silo.val else silo.train
    which = "val" if silo.val else "train"
    src, tgt = encode_pairs(silo.vocab, pairs, config.max_len)
    loss, acc = local_evaluate(weights, config, src, tgt)
    print(f"{which}: n={len(pairs)}  loss={loss:.4f}  acc={acc:.2f}%")
    return 0


def cmd_chat(args) -> int:
    weights, config = load_model(args.model)
    vocab = Vocabulary.load(args.vocab)
    if len(vocab) != config.vocab_size:
        raise DataError(
            f"vocabulary size {len(vocab)} does not match model ({config.vocab_size})"
        )

    def answer(text: str) -> str:
        src = encode(vocab, normalize(text), config.max_len)
        return decode(vocab, greedy_decode(weights, config, src).ids)

    if args.message is not None:
        print(answer(args.message))
        return 0
    print("type a message, empty line or ctrl-d to quit")
    while True:
        try:
            line = input("> ").strip()
        except EOFError:
            return 0
        if not line:
            return 0
        print(answer(line))


def cmd_combiner(args) -> int:
    if args.model:
        weights, config = load_model(args.model)
    else:
        vocab = Vocabulary.load(args.vocab)
        config = _config_from_args(args, len(vocab))
        weights = init_weights(config, seed=args.seed)
    server = CombinerServer(
        initial_weights=weights,
        rounds=args.rounds,
        host=args.host,
        port=args.port,
        epochs=args.epochs,
        lr=args.lr,
        batch_size=args.batch_size,
        fraction=args.fraction,
        min_clients=args.min_clients,
        deadline_ms=args.deadline_ms,
        merge=args.merge,
        seed=args.seed,
        metrics_path=args.metrics,
        join_timeout=args.join_timeout,
    )
    server.start()
    print(f"combiner on {server.host}:{server.port}, status on :{server.http_port}")
    print("# " + "\t".join(METRICS_COLUMNS))
    state = server.run()
    for result in state.history:
        print(metrics_row(result))
    if args.out:
        save_model(args.out, state.weights, _model_config_of(weights, args))
        print(f"saved global model to {args.out}")
    return 0


def _model_config_of(weights, args) -> TransformerConfig:
    if args.model:
        return load_model(args.model)[1]
    vocab_size = weights["embed.src"].shape[0]
    return _config_from_args(args, vocab_size)


def cmd_client(args) -> int:
    silo = load_silo(args.silo)
    config = _config_from_args(args, len(silo.vocab))
    client = FederatedClient(
        silo.client_id, silo.train, silo.val, silo.vocab, config,
        optimizer=args.optimizer, use_dropout=args.use_dropout, base_seed=args.seed,
    )
    rounds = run_client(args.host, args.port, client, stop_after_rounds=args.stop_after_rounds)
    print(f"{silo.client_id}: completed {rounds} rounds")
    if args.out and client.global_weights is not None:
        save_model(args.out, client.global_weights, config)
        print(f"saved final global model to {args.out}")
    return 0


def cmd_add_pair(args) -> int:
    query, response = normalize(args.query), normalize(args.response)
    if not query or not response:
        raise DataError("query and response must be non-empty after normalization")
    manifest_path = os.path.join(args.silo, "manifest.txt")
    manifest = load_kv(manifest_path)
    with open(os.path.join(args.silo, "train.tsv"), "a", encoding="utf-8") as fh:
        fh.write(f"{query}\t{response}\n")
    manifest["n_train"] = int(manifest.get("n_train", 0)) + 1
    save_kv(manifest_path, manifest)
    print(f"added pair, silo now holds {manifest['n_train']} training pairs")
    return 0


def cmd_chat_service(args) -> int:
    client = None
    combiner_status_url = None
    if args.silo:
        silo = load_silo(args.silo)
        vocab = silo.vocab
        config = _config_from_args(args, len(vocab))
        weights = None
        client = FederatedClient(
            silo.client_id, silo.train, silo.val, vocab, config,
            optimizer=args.optimizer, use_dropout=args.use_dropout, base_seed=args.seed,
        )
        combiner_status_url = f"http://{args.host}:{args.port + 1}/federation/status"
    elif args.model:
        weights, config = load_model(args.model)
        vocab = Vocabulary.load(args.vocab)
        if len(vocab) != config.vocab_size:
            raise DataError("vocabulary does not match model")
    else:
        raise DataError("chat-service needs --silo (live) or --model + --vocab (static)")

    service = ChatService(
        config, vocab, weights=weights, feedback_client=client,
        journal_path=args.journal, combiner_status_url=combiner_status_url,
    )
    if client is not None:
        client.on_global = service.on_round_result
        worker = threading.Thread(
            target=run_client, args=(args.host, args.port, client), daemon=True,
        )
        worker.start()
    elif weights is not None:
        service.set_weights(weights, 0)
    httpd = serve_chat(service, args.http_host, args.http_port)
    print(f"chat service on http://{args.http_host}:{httpd.server_address[1]}")
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        httpd.shutdown()
        return 0


# -- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedbot",
        description="federated chatbot: silo preparation, training, serving",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="info-level logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="extract pairs from a CSV and write client silos")
    p.add_argument("--csv", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--clients", type=int, default=3)
    p.add_argument("--by-brand", action="store_true", help="one silo per support handle")
    p.add_argument("--vocab-size", type=int, default=8192)
    p.add_argument("--min-freq", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--limit", type=int, default=None, help="cap extracted pairs")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train-central", help="train on one silo without federation")
    p.add_argument("--silo", required=True)
    p.add_argument("--out", required=True, help="output model file")
    _add_model_args(p)
    _add_train_args(p)
    p.set_defaults(func=cmd_train_central)

    p = sub.add_parser("evaluate", help="loss and accuracy of a model on a silo")
    p.add_argument("--model", required=True)
    p.add_argument("--silo", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("chat", help="talk to a saved model")
    p.add_argument("--model", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--message", default=None, help="one-shot message instead of a REPL")
    p.set_defaults(func=cmd_chat)

    p = sub.add_parser("combiner", help="run the federation server")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=DEFAULT_PORT)
    p.add_argument("--rounds", type=int, required=True)
    p.add_argument("--vocab", help="vocabulary file for fresh weights")
    p.add_argument("--model", help="warm-start from a saved model")
    p.add_argument("--out", help="save the final global model here")
    p.add_argument("--fraction", type=float, default=1.0)
    p.add_argument("--min-clients", type=int, default=1)
    p.add_argument("--deadline-ms", type=int, default=0)
    p.add_argument("--merge", choices=MERGE_MODES, default="incremental")
    p.add_argument("--metrics", help="append tab-separated round metrics to this file")
    p.add_argument("--join-timeout", type=float, default=120.0)
    _add_model_args(p)
    _add_train_args(p)
    p.set_defaults(func=cmd_combiner)

    p = sub.add_parser("client", help="join a federation and train on a silo")
    p.add_argument("--silo", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=DEFAULT_PORT)
    p.add_argument("--out", help="save the final global model here")
    p.add_argument("--stop-after-rounds", type=int, default=None)
    _add_model_args(p)
    _add_train_args(p)
    p.set_defaults(func=cmd_client)

    p = sub.add_parser("add-pair", help="append a feedback pair to a silo")
    p.add_argument("--silo", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--response", required=True)
    p.set_defaults(func=cmd_add_pair)

    p = sub.add_parser("chat-service", help="HTTP chat endpoint over the global model")
    p.add_argument("--silo", help="live mode: train on this silo and follow the federation")
    p.add_argument("--model", help="static mode: serve this saved model")
    p.add_argument("--vocab", help="vocabulary for static mode")
    p.add_argument("--host", default="127.0.0.1", help="combiner host")
    p.add_argument("--port", type=int, default=DEFAULT_PORT, help="combiner port")
    p.add_argument("--http-host", default="127.0.0.1")
    p.add_argument("--http-port", type=int, default=DEFAULT_HTTP_PORT)
    p.add_argument("--journal", help="append chat and feedback events to this JSONL file")
    _add_model_args(p)
    _add_train_args(p)
    p.set_defaults(func=cmd_chat_service)

    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        return args.func(args)
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ProtocolError, Disconnected) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except FedbotError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def combiner_main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    return main(["combiner", *argv])


def client_main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    return main(["client", *argv])


if __name__ == "__main__":
    sys.exit(main())
