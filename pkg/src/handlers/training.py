"""run-unsup / run-sup: the unsupervised pipeline and its supervised topline."""
import logging

from src.handlers.router import Router, config_from_args
from src.services.pipeline import RunReport, run_supervised_topline, run_unsupervised

logger = logging.getLogger(__name__)
router = Router()


def print_summary(report: RunReport) -> None:
    print(f"Режим: {report.mode}, единицы: {report.units}, язык: {report.language}")
    for stage in ("gan", "hmm", "ctc"):
        metrics = report.stages.get(stage)
        if metrics:
            print(f"  {stage:<4} valid {metrics['valid_error']:.4f}  test {metrics['test_error']:.4f}")
    if report.tts:
        print(f"  TTS  CER {report.tts['cer']:.4f}  WER {report.tts['wer']:.4f}")
        print(f"  Порог оценки (oracle на реальном аудио): CER {report.floor['cer']:.4f}")
    print(f"Digest конфигурации: {report.config_digest}")


@router.command("run-unsup", help="Полный неконтролируемый прогон: ASR -> self-training -> TTS -> оценка")
def cmd_run_unsup(args) -> int:
    print_summary(run_unsupervised(config_from_args(args)))
    return 0


@router.command("run-sup", help="Supervised topline: тот же рецепт TTS на реальных транскрипциях")
def cmd_run_sup(args) -> int:
    print_summary(run_supervised_topline(config_from_args(args)))
    return 0
