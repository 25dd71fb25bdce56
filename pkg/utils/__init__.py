"""
tencache-sim ユーティリティモジュール
レポート出力とイベントログ機能を提供
"""

from .csv_exporter import ReportExporter
from .event_log import EventLog

__all__ = ['ReportExporter', 'EventLog']
