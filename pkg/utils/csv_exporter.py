"""
tencache-sim レポート出力モジュール

シミュレーション結果を JSON / CSV 形式で出力します。
同じ入力からは常に同じバイト列が出力されるよう、ファイル名に時刻を含めません。

主要クラス:
    - ReportExporter: レポート出力機能

機能:
    - 1実行のレポートJSON出力
    - 方針比較表・スイープ表のCSV出力（pandas）
    - プリフェッチテーブル・バッファチャンク・配置のダンプ
"""
import csv
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence

import pandas as pd

from core.analyzer import PrefetchTable
from core.bufpool import BufferPool
from core.engine import SimReport
from core.machine import Location

SUMMARY_COLUMNS = [
    "policy",
    "mode",
    "total_time_us",
    "compute_us",
    "stall_us",
    "hit_rate",
    "optimizer_miss_rate",
    "gpu_utilization_timeavg",
    "cpu_utilization_timeavg",
    "fp16_in_nvme_count",
    "transfer_count",
]


def summary_frame(reports: Sequence[SimReport]) -> pd.DataFrame:
    """レポート列を1行1実行の表にする

    speedup は先頭の実行がその行の実行より何倍速いか（先頭の行は 1.0）。
    """
    rows = []
    for report in reports:
        data = report.to_dict()
        row = {key: data[key] for key in SUMMARY_COLUMNS}
        for threshold, pct in data["pct_wait_below"].items():
            row[f"pct_wait_below_{threshold}us"] = pct
        rows.append(row)
    frame = pd.DataFrame(rows)
    if not frame.empty:
        base = reports[0].total_time_us
        frame["speedup"] = [float(r.total_time_us / base) if base else 0.0 for r in reports]
    return frame


class ReportExporter:
    """レポート出力クラス"""

    def __init__(self, output_dir: str):
        self.output_dir = Path(output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)
        self.logger = logging.getLogger(__name__)

    def export_report(self, report: SimReport, filename: Optional[str] = None) -> str:
        """1実行分のレポートをJSONで出力"""
        report_path = self.output_dir / (filename or f"report_{report.policy}.json")
        try:
            with open(report_path, 'w', encoding='utf-8') as f:
                json.dump(report.to_dict(), f, indent=2, ensure_ascii=False)
                f.write("\n")
            self.logger.info(f"レポート出力完了: {report_path}")
            return str(report_path)
        except Exception as e:
            self.logger.error(f"レポート出力エラー: {str(e)}")
            raise

    def export_compare(self, reports: Sequence[SimReport], filename: str = "compare.csv") -> str:
        """方針比較表をCSVで出力"""
        compare_path = self.output_dir / filename
        try:
            summary_frame(reports).to_csv(compare_path, index=False, encoding='utf-8-sig')
            self.logger.info(f"比較表出力完了: {compare_path}")
            return str(compare_path)
        except Exception as e:
            self.logger.error(f"比較表出力エラー: {str(e)}")
            raise

    def export_sweep(self, axis: str, values: Sequence[Any], reports: Sequence[SimReport],
                     filename: Optional[str] = None) -> str:
        """スイープ結果をCSVで出力（1行目が軸の値）"""
        if len(values) != len(reports):
            raise ValueError(f"値の数 {len(values)} とレポート数 {len(reports)} が一致しません")
        sweep_path = self.output_dir / (filename or f"sweep_{axis}.csv")
        try:
            frame = summary_frame(reports)
            frame.insert(0, axis, [str(v) for v in values])
            frame.to_csv(sweep_path, index=False, encoding='utf-8-sig')
            self.logger.info(f"スイープ結果出力完了: {sweep_path}")
            return str(sweep_path)
        except Exception as e:
            self.logger.error(f"スイープ結果出力エラー: {str(e)}")
            raise

    def _write_rows(self, path: Path, fieldnames: List[str], rows: List[Dict[str, Any]]) -> str:
        try:
            with open(path, 'w', newline='', encoding='utf-8-sig') as csvfile:
                writer = csv.DictWriter(csvfile, fieldnames=fieldnames)
                writer.writeheader()
                writer.writerows(rows)
            self.logger.info(f"CSV出力完了: {path}")
            return str(path)
        except Exception as e:
            self.logger.error(f"CSV出力エラー: {str(e)}")
            raise

    def export_prefetch_table(self, table: PrefetchTable, filename: str = "prefetch_table.csv") -> str:
        rows = [
            {
                "row": r.order,
                "tensor_id": r.tensor_id,
                "activation_us": str(r.activation_us),
                "step_index": r.step_index,
                "current_location": r.current_loc.value,
                "final_location": r.final_loc.value,
            }
            for r in table.rows
        ]
        fieldnames = ["row", "tensor_id", "activation_us", "step_index", "current_location", "final_location"]
        return self._write_rows(self.output_dir / filename, fieldnames, rows)

    def export_chunks(self, pools: Mapping[Location, BufferPool], filename: str = "chunks.csv") -> str:
        rows = [
            {
                "tier": tier.value,
                "buffer_id": c.buffer_id,
                "offset": c.offset,
                "size": c.size,
                "state": c.state.value,
                "occupant": "" if c.occupant is None else c.occupant,
                "gpu_designated": int(c.gpu_designated),
            }
            for tier, pool in pools.items()
            for c in pool.chunks
        ]
        fieldnames = ["tier", "buffer_id", "offset", "size", "state", "occupant", "gpu_designated"]
        return self._write_rows(self.output_dir / filename, fieldnames, rows)

    def export_placement(self, locations: Mapping[int, Location], finals: Mapping[int, Location],
                         filename: str = "placement.csv") -> str:
        rows = [
            {"tensor_id": tid, "location": locations[tid].value, "final_location": finals.get(tid, locations[tid]).value}
            for tid in sorted(locations)
        ]
        return self._write_rows(self.output_dir / filename, ["tensor_id", "location", "final_location"], rows)
