#!/usr/bin/env python3
"""Скрипт вывода реестра прогонов и стадий в виде таблицы."""
import sys
import os
import io
import argparse
import logging
import warnings

# Windows: UTF-8 для консоли, чтобы русский и символы таблицы отображались
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
from src.services.registry import list_runs, list_stages


def format_runs(mode=None, status=None, with_stages=False) -> list[str]:
    """Table lines for the registry (empty list when there are no runs)."""
    runs = list_runs(mode=mode, status=status)
    if not runs:
        return []
    lines = [f"{'ID':>4}  {'Режим':<13}{'Статус':<11}{'Digest':<14}{'Создан':<21}Каталог"]
    lines.append("-" * 100)
    for run in runs:
        created = run.created_at.strftime("%Y-%m-%d %H:%M:%S") if run.created_at else "-"
        lines.append(f"{run.id:>4}  {run.mode:<13}{run.status:<11}{run.config_digest[:12]:<14}{created:<21}{run.out_dir}")
        if with_stages:
            for stage in list_stages(run.id):
                took = f"{stage.wall_clock_s:.1f} с" if stage.wall_clock_s is not None else "-"
                lines.append(f"        {stage.stage:<10}{stage.status:<11}{took:>10}  {stage.artifact_dir}")
    return lines


def main():
    Config.DEV_MODE = False  # отключить вывод SQL
    parser = argparse.ArgumentParser(description="Реестр прогонов (SQLite)")
    parser.add_argument("--mode", help="Только прогоны этого режима (unsupervised, supervised, grid, ...)")
    parser.add_argument("--status", choices=("running", "completed", "failed"), help="Фильтр по статусу")
    parser.add_argument("--stages", action="store_true", help="Показать стадии каждого прогона")
    args = parser.parse_args()

    print(f"База данных: {Config.DB_PATH}")
    if not os.path.isfile(Config.DB_PATH):
        print("Файл БД не найден. Прогонов ещё не было.")
        return 0

    lines = format_runs(args.mode, args.status, args.stages)
    if not lines:
        print("Прогонов нет.")
        return 0
    print("\n".join(lines))
    return 0


if __name__ == "__main__":
    sys.exit(main())
