from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Generic, Mapping, Optional, TypeVar

from pydantic import BaseModel

from src.app.core.errors import ConfigError

Config = TypeVar("Config", bound=BaseModel)


@dataclass
class CommandContext(Generic[Config]):
    """То, что получает обработчик: проверенный конфиг и каталог запуска."""

    config: Config
    run: Any
    overrides: dict[str, Any] = field(default_factory=dict)


Handler = Callable[[CommandContext[Any]], None]


@dataclass
class Command:
    name: str
    handler: Handler
    config_model: type[BaseModel]
    help: str = ""
    flags: dict[str, str] = field(default_factory=dict)
    tags: tuple[str, ...] = ()


class CommandRouter:
    """Регистрация команд декоратором, по образцу роутеров HTTP-фреймворков.

    ``flags`` связывает общий флаг CLI (``seed``, ``steps``, ``corrected``,
    ``rank``) с путём ключа в конфиге, например ``{"steps": "train.steps"}``.
    """

    def __init__(self) -> None:
        self.commands: dict[str, Command] = {}

    def command(
        self,
        name: str,
        *,
        config: type[BaseModel],
        help: str = "",
        flags: Optional[Mapping[str, str]] = None,
    ) -> Callable[[Handler], Handler]:
        def register(handler: Handler) -> Handler:
            if name in self.commands:
                raise ConfigError(f"command {name!r} registered twice")
            self.commands[name] = Command(name, handler, config, help, dict(flags or {}))
            return handler

        return register

    def include_router(self, router: "CommandRouter", *, tags: tuple[str, ...] = ()) -> None:
        for name, cmd in router.commands.items():
            if name in self.commands:
                raise ConfigError(f"command {name!r} registered twice")
            self.commands[name] = Command(cmd.name, cmd.handler, cmd.config_model, cmd.help, cmd.flags, tags)


def read_config_file(path: Optional[Path]) -> dict[str, Any]:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object")
    return data


def set_path(data: dict[str, Any], dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    node = data
    for key in keys[:-1]:
        child = node.get(key)
        if not isinstance(child, dict):
            child = {}
            node[key] = child
        node = child
    node[keys[-1]] = value


def build_config(
    command: Command, path: Optional[Path], flags: Mapping[str, Any]
) -> tuple[BaseModel, dict[str, Any]]:
    """Значения модели по умолчанию < JSON-файл < флаги CLI.

    Returns:
        tuple: Проверенный конфиг и применённые переопределения (путь ключа -> значение)

    Raises:
        ConfigError: Флаг не поддерживается командой
        ValidationError: Конфиг не проходит схему (в том числе неизвестные ключи)
    """
    data = read_config_file(path)
    applied: dict[str, Any] = {}
    for flag, value in flags.items():
        if value is None or value is False:
            continue
        if flag not in command.flags:
            raise ConfigError(f"--{flag} is not supported by {command.name}")
        target = command.flags[flag]
        # ablate принимает один ранг или сид как сетку из одного значения
        if target in ("ranks", "seeds"):
            value = [value]
        set_path(data, target, value)
        applied[target] = value
    return command.config_model.model_validate(data), applied
