"""gen-corpus: render the toy corpus only."""
import logging

from src.handlers.router import Router, config_from_args
from src.services.pipeline import generate

logger = logging.getLogger(__name__)
router = Router()


@router.command("gen-corpus", help="Сгенерировать корпус игрушечного языка (wav + manifest.tsv)")
def cmd_gen_corpus(args) -> int:
    cfg = config_from_args(args)
    report = generate(cfg)
    print(f"Корпус: {report.language}, {report.stages['corpus']['utterances']} высказываний")
    print(f"Digest корпуса: {report.corpus_digest}")
    return 0
