from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Optional, Sequence

from pydantic import BaseModel, ValidationError

from src.app.api.evaluation import router as evaluation_router
from src.app.api.flows import router as flows_router
from src.app.api.stages import router as stages_router
from src.app.core.commands import Command, CommandContext, CommandRouter, build_config
from src.app.core.config import settings
from src.app.core.errors import LabError
from src.app.db.storage import RunDirectory

logger = logging.getLogger(__name__)

app = CommandRouter()
app.include_router(flows_router, tags=("flows",))
app.include_router(stages_router, tags=("stages",))
app.include_router(evaluation_router, tags=("evaluation",))

COMMON_FLAGS = ("seed", "steps", "corrected", "rank")


def build_parser(router: CommandRouter = app) -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flowlab",
        description="Rectified flow, поправка Твиди, дистилляция и двухэтапная адаптация на игрушечных данных",
    )
    parser.add_argument("--version", action="version", version=settings.VERSION)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, cmd in router.commands.items():
        p = sub.add_parser(name, help=cmd.help, description=cmd.help)
        p.add_argument("--config", type=Path, default=None, help="JSON-файл конфигурации")
        p.add_argument("--out", type=Path, default=None, help=f"Каталог запусков (по умолчанию {settings.RUNS_DIR})")
        p.add_argument("--force", action="store_true", help="Перезаписать существующий запуск")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--steps", type=int, default=None)
        p.add_argument("--corrected", action="store_true")
        p.add_argument("--rank", type=int, default=None)
    return parser


def manifest_seed(config: BaseModel) -> int:
    seed = getattr(config, "seed", None)
    if seed is None:
        seeds = getattr(config, "seeds", ())
        seed = seeds[0] if seeds else 0
    return int(seed)


def _config_failure(exc: Exception) -> int:
    if isinstance(exc, ValidationError):
        logger.error("invalid config: %s", exc)
        return 2
    assert isinstance(exc, LabError)
    logger.error("%s: %s", type(exc).__name__, exc)
    return exc.exit_code


def run_command(
    cmd: Command,
    *,
    config_path: Optional[Path] = None,
    flags: Optional[dict[str, Any]] = None,
    out: Optional[Path] = None,
    force: bool = False,
) -> int:
    """Проверка конфига, каталог запуска, обработчик; возвращает код выхода.

    Returns:
        int: 0 при успехе, 2 конфиг, 3 численная ошибка, 4 нарушение инварианта, 1 прочее
    """
    try:
        config, overrides = build_config(cmd, config_path, flags or {})
        run = RunDirectory.open(
            cmd.name, config, out=out, seed=manifest_seed(config), overrides=overrides, force=force
        )
    except (ValidationError, LabError) as exc:
        return _config_failure(exc)

    logger.info("running %s in %s", cmd.name, run.root)
    code = 1
    try:
        cmd.handler(CommandContext(config, run, overrides))
        code = 0
    except ValidationError as exc:
        code = _config_failure(exc)
    except LabError as exc:
        code = exc.exit_code
        logger.error("%s failed (%s, exit %d): %s", cmd.name, type(exc).__name__, code, exc)
    except Exception:
        code = 1
        logger.exception("%s crashed", cmd.name)
    finally:
        manifest = run.finish(code)
        logger.info("%s finished with status %s", cmd.name, manifest.status)
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(
        level=settings.log_level,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )
    args = build_parser().parse_args(argv)
    flags = {flag: getattr(args, flag) for flag in COMMON_FLAGS}
    return run_command(app.commands[args.command], config_path=args.config, flags=flags, out=args.out, force=args.force)


if __name__ == "__main__":
    sys.exit(main())
