"""compare-units / grid-search / eval: multi-run studies."""
import logging

from src.handlers.router import Router, config_from_args
from src.handlers.training import print_summary
from src.services.pipeline import compare_supervision, compare_units, run_grid

logger = logging.getLogger(__name__)
router = Router()


@router.command("compare-units", help="Фонемы против графем на одном корпусе (по умолчанию пресет digraph)")
def cmd_compare_units(args) -> int:
    if not args.preset:
        args.preset = "digraph"
    phoneme, grapheme = compare_units(config_from_args(args))
    print(f"{'units':<10}{'TTS CER':>10}{'TTS WER':>10}")
    for report in (phoneme, grapheme):
        print(f"{report.units:<10}{report.tts['cer']:>10.4f}{report.tts['wer']:>10.4f}")
    return 0


@router.command("grid-search", help="Подбор весов штрафов GAN по валидационному PER")
def cmd_grid_search(args) -> int:
    report = run_grid(config_from_args(args))
    cells = report.stages["gan"].get("grid", [])
    print(f"{'gp':>6}{'sp':>6}{'pd':>6}{'valid':>10}")
    for cell in cells:
        print(f"{cell['gp_weight']:>6g}{cell['smoothness_weight']:>6g}{cell['diversity_weight']:>6g}"
              f"{cell['valid_error']:>10.4f}")
    print(f"Победитель: {report.stages['gan']['weights']}")
    return 0


@router.command("eval", help="Неконтролируемый прогон и supervised topline с разрывом CER/WER")
def cmd_eval(args) -> int:
    unsup, sup, comparison = compare_supervision(config_from_args(args))
    print_summary(unsup)
    print_summary(sup)
    cer = comparison["cer_gap"]
    print(f"Разрыв CER: {cer['absolute']:+.4f} абс., {cer['relative']:+.2%} отн.")
    return 0
