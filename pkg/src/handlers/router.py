"""Command routers: each handler module registers its subcommands on a Router."""
import argparse
from dataclasses import dataclass
from typing import Callable, Optional

from src.config import PipelineConfig, load_pipeline_config

Handler = Callable[[argparse.Namespace], int]


@dataclass
class Command:
    name: str
    help: str
    handler: Handler
    configure: Callable[[argparse.ArgumentParser], None]


class Router:
    """Collects subcommands; main.py mounts every router on one argparse parser."""

    def __init__(self):
        self.commands: list[Command] = []

    def command(self, name: str, help: str,
                configure: Optional[Callable[[argparse.ArgumentParser], None]] = None) -> Callable[[Handler], Handler]:
        def decorator(handler: Handler) -> Handler:
            self.commands.append(Command(name, help, handler, configure or add_pipeline_arguments))
            return handler
        return decorator

    def mount(self, subparsers) -> None:
        for cmd in self.commands:
            parser = subparsers.add_parser(cmd.name, help=cmd.help, description=cmd.help)
            parser.add_argument("--verbose", "-v", action="store_true", help="Подробный лог в консоль")
            cmd.configure(parser)
            parser.set_defaults(handler=cmd.handler)


def add_pipeline_arguments(parser: argparse.ArgumentParser) -> None:
    """Flags that mirror PipelineConfig."""
    parser.add_argument("--config", "-c", help="Файл конфигурации (key = value, секции [run], [gan], ...)")
    parser.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="Переопределить значение конфигурации (можно несколько раз)")
    parser.add_argument("--preset", choices=("unambig", "digraph"), help="Пресет игрушечного языка")
    parser.add_argument("--units", choices=("phoneme", "grapheme"), help="Единицы ASR/TTS")
    parser.add_argument("--seed", type=int, help="Главный seed прогона")
    parser.add_argument("--out", help="Каталог прогона")
    parser.add_argument("--no-ctc", action="store_true", help="Отключить стадию CTC")


def config_from_args(args: argparse.Namespace) -> PipelineConfig:
    """Config file < dedicated flags < --set overrides."""
    overrides: list[str] = []
    if args.preset:
        overrides.append(f"corpus.preset={args.preset}")
    if args.units:
        overrides.append(f"units.kind={args.units}")
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")
    if args.out:
        overrides.append(f"run.output_dir={args.out}")
    if args.no_ctc:
        overrides.append("ctc.enabled=false")
    return load_pipeline_config(args.config, overrides + list(args.set))
