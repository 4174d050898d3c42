#!/usr/bin/env python3
"""Скрипт очистки реестра прогонов: удаляет записи прогонов и стадий и каталоги артефактов стадий.
Следующий прогон с той же конфигурацией пересчитает удалённые стадии заново."""
import sys
import os
import io
import argparse
import logging
import shutil
import warnings

if sys.platform == "win32":
    try:
        sys.stdout = io.TextIOWrapper(sys.stdout.buffer, encoding="utf-8", errors="replace")
        sys.stderr = io.TextIOWrapper(sys.stderr.buffer, encoding="utf-8", errors="replace")
    except Exception:
        pass

warnings.filterwarnings("ignore")
logging.basicConfig(level=logging.CRITICAL + 1)
for _ in ("sqlalchemy", "sqlalchemy.engine", "sqlalchemy.engine.base", "sqlalchemy.pool"):
    logging.getLogger(_).setLevel(logging.CRITICAL + 1)

sys.path.insert(0, os.path.join(os.path.dirname(__file__), ".."))

from src.config import Config
from src.services.registry import delete_run_records, list_runs, list_stages


def plan(mode=None, status=None) -> list[tuple[int, list[str]]]:
    """(run id, stage artifact dirs) for every run matching the filters."""
    return [
        (run.id, sorted({s.artifact_dir for s in list_stages(run.id)}))
        for run in list_runs(mode=mode, status=status)
    ]


def clear_runs(mode=None, status=None, dry_run: bool = False) -> dict[str, int]:
    counts = {"runs": 0, "stages": 0, "dirs": 0}
    for run_id, dirs in plan(mode, status):
        counts["runs"] += 1
        counts["stages"] += len(list_stages(run_id))
        existing = [d for d in dirs if os.path.isdir(d)]
        counts["dirs"] += len(existing)
        if dry_run:
            continue
        for d in existing:
            shutil.rmtree(d, ignore_errors=True)
        delete_run_records(run_id)
    return counts


def main():
    Config.DEV_MODE = False  # отключить вывод SQL
    parser = argparse.ArgumentParser(description="Очистка реестра прогонов и артефактов стадий.")
    parser.add_argument("--yes", "-y", action="store_true", help="Не спрашивать подтверждение")
    parser.add_argument("--dry-run", action="store_true", help="Только показать, что будет удалено, не удалять")
    parser.add_argument("--mode", help="Только прогоны этого режима")
    parser.add_argument("--status", choices=("running", "completed", "failed"), help="Только прогоны с этим статусом")
    args = parser.parse_args()

    print(f"База данных: {Config.DB_PATH}")
    if not os.path.isfile(Config.DB_PATH):
        print("Файл БД не найден. Нечего очищать.")
        return 0

    counts = clear_runs(args.mode, args.status, dry_run=True)
    if counts["runs"] == 0:
        print("Подходящих прогонов нет.")
        return 0

    print("\nБудет удалено:")
    print(f"  прогонов: {counts['runs']}")
    print(f"  записей стадий: {counts['stages']}")
    print(f"  каталогов артефактов: {counts['dirs']}\n")

    if args.dry_run:
        print("Режим --dry-run: ничего не удалено.")
        return 0

    if not args.yes:
        try:
            answer = input("Продолжить? [y/N]: ").strip().lower()
        except EOFError:
            answer = "n"
        if answer not in ("y", "yes", "д", "да"):
            print("Отменено.")
            return 0

    clear_runs(args.mode, args.status, dry_run=False)
    print("Прогоны удалены.")
    return 0


if __name__ == "__main__":
    sys.exit(main())
