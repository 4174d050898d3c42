"""emit-figures: images and CSVs of a completed run."""
import logging

from src.handlers.router import Router
from src.services.pipeline import emit_figures

logger = logging.getLogger(__name__)
router = Router()


def _arguments(parser) -> None:
    parser.add_argument("run_dir", help="Каталог завершённого прогона")


@router.command("emit-figures", help="Мел-спектрограммы, матрицы внимания и кривые обучения прогона",
                configure=_arguments)
def cmd_emit_figures(args) -> int:
    written = emit_figures(args.run_dir)
    print(f"Записано файлов: {len(written)}")
    return 0
