import concurrent.futures
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List
import logging

logger = logging.getLogger(__name__)


@dataclass
class RunTask:
    """一次独立运行：名称、有效配置与专属输出目录"""
    name: str
    config: Dict[str, Any]
    output_dir: Path
    tags: Dict[str, Any] = field(default_factory=dict)


class ParallelProcessor:
    """独立运行的执行器：默认顺序执行，可选进程池（各运行输出目录互不相交）"""

    def __init__(self, max_workers: int = 1):
        self.max_workers = max(1, int(max_workers))
        self._results: Dict[str, Any] = {}
        self._errors: Dict[str, str] = {}

    def run_all(self, tasks: List[RunTask], run_func: Callable[[RunTask], Any]) -> Dict[str, Any]:
        """执行全部任务，结果按任务顺序返回；失败的任务记录在 get_errors() 中"""
        names = [task.name for task in tasks]
        if len(set(names)) != len(names):
            raise ValueError(f"任务名称重复: {names}")
        dirs = [Path(task.output_dir).resolve() for task in tasks]
        if len(set(dirs)) != len(dirs):
            raise ValueError("任务输出目录必须互不相同")

        self._results.clear()
        self._errors.clear()

        if self.max_workers == 1:
            logger.info(f"顺序执行 {len(tasks)} 个运行")
            for task in tasks:
                self._collect(task.name, lambda t=task: run_func(t))
        else:
            logger.info(f"并行执行 {len(tasks)} 个运行，进程数: {self.max_workers}")
            with concurrent.futures.ProcessPoolExecutor(max_workers=self.max_workers) as executor:
                future_to_name = {executor.submit(run_func, task): task.name for task in tasks}
                for future in concurrent.futures.as_completed(future_to_name):
                    self._collect(future_to_name[future], future.result)

        logger.info(f"执行完成: 成功 {len(self._results)}, 失败 {len(self._errors)}")
        return {name: self._results[name] for name in names if name in self._results}

    def _collect(self, name: str, get_result: Callable[[], Any]) -> None:
        try:
            self._results[name] = get_result()
            logger.info(f"运行 {name} 完成")
        except Exception as e:
            self._errors[name] = str(e)
            logger.error(f"运行 {name} 失败: {e}")

    def get_results(self) -> Dict[str, Any]:
        return self._results

    def get_errors(self) -> Dict[str, str]:
        return self._errors
