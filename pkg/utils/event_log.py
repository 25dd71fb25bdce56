"""
tencache-sim イベントログ

転送・ストールのイベントを1行1レコードのJSONで記録します。
ゴールデントレースとの比較や利用率の再計算に使います。

主要クラス:
    - EventLog: イベントの蓄積とファイル出力

機能:
    - write: レコード追加（エンジンから呼ばれる）
    - save / load_event_log: JSONL ファイルの書き込み/読み込み
    - utilization_from_log: ログからティア占有量の時間平均を再計算
"""
import json
import logging
from fractions import Fraction
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Tuple, Union

logger = logging.getLogger(__name__)

TRANSFER_KINDS = ("prefetch", "evict", "fetch", "restore", "writeback", "release")


class EventLog:
    """エンジンが発行したイベントを順に保持する"""

    def __init__(self, path: Optional[Union[str, Path]] = None):
        self.path = Path(path) if path is not None else None
        self.records: List[Dict[str, Any]] = []
        self.logger = logging.getLogger(__name__)

    def write(self, record: Dict[str, Any]) -> None:
        self.records.append(dict(record))

    def __len__(self) -> int:
        return len(self.records)

    def of_kind(self, *kinds: str) -> List[Dict[str, Any]]:
        return [r for r in self.records if r["kind"] in kinds]

    def transfers(self) -> List[Tuple[str, int, str, str]]:
        """(kind, tensor, src, dst) の列（ゴールデン比較用）"""
        return [(r["kind"], r["tensor"], r["src"], r["dst"]) for r in self.of_kind(*TRANSFER_KINDS)]

    def save(self, path: Optional[Union[str, Path]] = None) -> Path:
        target = Path(path) if path is not None else self.path
        if target is None:
            raise ValueError("イベントログの出力先が指定されていません")
        try:
            target.parent.mkdir(parents=True, exist_ok=True)
            with open(target, 'w', encoding='utf-8') as f:
                for record in self.records:
                    f.write(json.dumps(record, ensure_ascii=False, sort_keys=True) + "\n")
            self.logger.info(f"イベントログ出力完了: {target} ({len(self.records)} 件)")
            return target
        except Exception as e:
            self.logger.error(f"イベントログ出力エラー: {str(e)}")
            raise


def load_event_log(path: Union[str, Path]) -> EventLog:
    log = EventLog(path)
    with open(path, 'r', encoding='utf-8') as f:
        for line in f:
            if line.strip():
                log.write(json.loads(line))
    return log


def utilization_from_log(records: Iterable[Dict[str, Any]], initial_bytes: int, tier: str,
                         capacity: int, total_us: Fraction) -> Fraction:
    """転送イベントからティア占有量を追い、時間平均の利用率を返す"""
    if total_us <= 0 or capacity <= 0:
        return Fraction(0)
    used = initial_bytes
    last = Fraction(0)
    area = Fraction(0)
    for r in records:
        if r["kind"] not in TRANSFER_KINDS or tier not in (r["src"], r["dst"]):
            continue
        at = Fraction(r["us"])
        area += used * (at - last)
        last = at
        used += r["size"] if r["dst"] == tier else -r["size"]
    area += used * (total_us - last)
    return area / (capacity * total_us)
