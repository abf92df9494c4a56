"""
Models Package
"""

from .program import Program, Instruction, MachineState
from .report import PipelineConfig, Report, CorpusRow, TestCaseRecord
