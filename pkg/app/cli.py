# app/cli.py
"""Точка входа fedmig: generate, simulate, evaluate, project, serve"""
import argparse
import json
import logging
import sys
import tomllib
from pathlib import Path
from typing import Any, Optional, Sequence

import uvicorn
from pydantic import ValidationError
from sqlalchemy.exc import SQLAlchemyError

from app import config
from app.errors import ConfigurationError, FedMigError
from app.main import create_app
from app.schemas import ABLATION_NAMES, AblationFlags, ExperimentConfig
from app.services.experiment import build_dataset, evaluate_checkpoints, project_client, run_experiment
from app.services.graphdata import save_federation

logger = logging.getLogger("app.cli")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2


def read_config_file(path: Optional[str]) -> dict[str, Any]:
    if path is None:
        return {}
    file = Path(path)
    if not file.exists():
        raise ConfigurationError(f"Файл конфигурации {file} не найден")
    try:
        with open(file, "rb") as fh:
            return tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"{file}: {exc}") from exc


def _parse_ablation(value: str) -> dict[str, bool]:
    names = [n.strip() for n in value.split(",") if n.strip()]
    try:
        return AblationFlags.disabling(names).model_dump()
    except ValueError as exc:
        raise ConfigurationError(f"--ablate: {exc}; допустимо: {', '.join(ABLATION_NAMES)}") from exc


def _parse_sbm(items: Sequence[str]) -> dict[str, Any]:
    """--sbm num_clients=8 nodes_per_client=[400,1200]: значения в синтаксисе TOML"""
    parsed: dict[str, Any] = {}
    for item in items:
        key, sep, raw = item.partition("=")
        if not sep or not key.strip():
            raise ConfigurationError(f"--sbm: ожидалось ключ=значение, получено {item!r}")
        try:
            parsed[key.strip()] = tomllib.loads(f"v = {raw.strip()}")["v"]
        except tomllib.TOMLDecodeError as exc:
            raise ConfigurationError(f"--sbm {key.strip()}: {exc}") from exc
    return parsed


def build_config(args: argparse.Namespace) -> ExperimentConfig:
    """TOML-файл, поверх него флаги командной строки"""
    data = read_config_file(getattr(args, "config", None))
    overrides = {
        "arm": getattr(args, "arm", None),
        "seed": getattr(args, "seed", None),
        "rounds": getattr(args, "rounds", None),
        "out_dir": getattr(args, "out", None),
        "lambda1": getattr(args, "lambda1", None),
        "lambda2": getattr(args, "lambda2", None),
        "threshold": getattr(args, "threshold", None),
        "clusters": getattr(args, "clusters", None),
        "gamma": getattr(args, "gamma", None),
    }
    data.update({k: v for k, v in overrides.items() if v is not None})
    if getattr(args, "ablate", None) is not None:
        data["ablation"] = _parse_ablation(args.ablate)
    if getattr(args, "sbm", None):
        data["sbm"] = {**data.get("sbm", {}), **_parse_sbm(args.sbm)}
    if getattr(args, "data", None) is not None:
        data.pop("sbm", None)
        data.pop("csv", None)
        data["data_dir"] = args.data
    dp = dict(data.get("dp", {}))
    if getattr(args, "dp", False):
        dp["enabled"] = True
    if getattr(args, "epsilon", None) is not None:
        dp["epsilon"] = args.epsilon
    if dp:
        data["dp"] = dp
    return ExperimentConfig.model_validate(data)


def cmd_generate(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    if cfg.data_dir is not None:
        raise ConfigurationError("generate строит данные из sbm или csv, а не из готового каталога")
    dataset = build_dataset(cfg)
    out = save_federation(dataset, args.out or cfg.out_dir)
    print(json.dumps({"out": str(out), "clients": len(dataset.clients),
                      "minority_classes": list(dataset.minority_classes)}))
    return EXIT_OK


def cmd_simulate(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    result = run_experiment(cfg)
    print(json.dumps(result.summary, sort_keys=True))
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    metrics = evaluate_checkpoints(args.checkpoint, build_dataset(cfg))
    print(metrics.model_dump_json(indent=2))
    return EXIT_OK


def cmd_project(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    out = Path(args.out) if args.out else Path(args.checkpoint) / f"projection_client_{args.client}.csv"
    project_client(args.checkpoint, build_dataset(cfg), args.client, out)
    print(str(out))
    return EXIT_OK


def cmd_serve(args: argparse.Namespace) -> int:
    uvicorn.run(create_app(args.ledger), host=args.host, port=args.port, log_level=config.LOG_LEVEL.lower())
    return EXIT_OK


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML-файл ExperimentConfig")
    p.add_argument("--data", help="каталог, записанный командой generate")
    p.add_argument("--sbm", nargs="+", action="extend", metavar="KEY=VALUE")
    p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedmig", description="Симулятор федеративного обучения на графах")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="сгенерировать федерацию и записать её в каталог")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--sbm", nargs="+", action="extend", metavar="KEY=VALUE",
                   help="поля таблицы [sbm] поверх файла конфигурации")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("simulate", help="прогнать эксперимент")
    _add_data_flags(p)
    p.add_argument("--arm", choices=["graphfedmig", "local", "fedavg", "flhc"])
    p.add_argument("--rounds", type=int)
    p.add_argument("--out")
    p.add_argument("--ablate", help=f"через запятую: {','.join(ABLATION_NAMES)}")
    p.add_argument("--lambda1", type=float)
    p.add_argument("--lambda2", type=float)
    p.add_argument("--threshold", type=float)
    p.add_argument("--clusters", type=int)
    p.add_argument("--gamma", type=float)
    p.add_argument("--dp", action="store_true", help="включить гауссов механизм для прототипов")
    p.add_argument("--epsilon", type=float)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("evaluate", help="метрики по контрольным точкам клиентов")
    _add_data_flags(p)
    p.add_argument("--checkpoint", required=True, help="каталог checkpoints/round_NNNN")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("project", help="PCA-проекция lz̃ одного клиента в CSV")
    _add_data_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--client", type=int, required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("serve", help="HTTP API над журналом запусков")
    p.add_argument("--ledger", help="путь к ledger.db (по умолчанию FEDMIG_LEDGER)")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    config.configure_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, ConfigurationError) as exc:
        print(f"Ошибка конфигурации: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FedMigError, SQLAlchemyError, OSError) as exc:
        logger.error("Прогон прерван: %s", exc)
        print(f"Ошибка: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
