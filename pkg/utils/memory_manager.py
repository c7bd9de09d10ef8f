"""内存管理模块"""

import gc
import psutil
from contextlib import contextmanager

from utils.log_manager import get_logger


class MemoryManager:
    """监控进程内存，估算 Gram 矩阵开销，并在必要时执行垃圾回收。"""

    def __init__(self, max_memory_mb: int = 1024):
        """初始化内存管理器"""
        self.max_memory_mb = max_memory_mb
        self.process = psutil.Process()
        self.logger = get_logger()

    def get_memory_usage(self) -> float:
        """获取当前内存使用量(MB)"""
        return self.process.memory_info().rss / 1024 / 1024

    @staticmethod
    def gram_size_mb(n_examples: int) -> float:
        """n×n float64 Gram 矩阵的大小(MB)"""
        return n_examples * n_examples * 8 / 1024 / 1024

    def check_gram_budget(self, n_examples: int, matrices: int = 2) -> bool:
        """检查全批次 Gram 矩阵是否超出内存预算

        超出时记录警告并建议改用小批次估计，返回 False。
        """
        required_mb = self.gram_size_mb(n_examples) * matrices
        if required_mb > self.max_memory_mb:
            self.logger.warning(
                "全批次 Gram 矩阵超出内存预算，建议使用小批次 CKA",
                n_examples=n_examples,
                required_mb=round(required_mb, 1),
                max_memory_mb=self.max_memory_mb
            )
            return False
        return True

    def cleanup_if_needed(self) -> bool:
        """根据需要清理内存"""
        current_memory = self.get_memory_usage()
        if current_memory > self.max_memory_mb:
            gc.collect()
            return True
        return False

    @contextmanager
    def memory_efficient_processing(self, operation: str = "processing"):
        """内存高效处理上下文管理器，处理完成后检查内存增长，
        增长超过 100MB 时触发垃圾回收。"""
        initial_memory = self.get_memory_usage()
        try:
            yield
        finally:
            self.cleanup_if_needed()
            final_memory = self.get_memory_usage()
            memory_delta = final_memory - initial_memory
            self.logger.debug(
                "内存使用情况",
                operation=operation,
                initial_mb=round(initial_memory, 1),
                final_mb=round(final_memory, 1)
            )
            if memory_delta > 100:  # 增长超过 100MB
                gc.collect()
