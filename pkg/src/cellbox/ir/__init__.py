"""MiniMIR: a small mid-level IR with typed locals, places, and direct calls."""

from .nodes import *  # noqa: F401,F403
from .parser import MiniMIRError, parse_program, tokenize
from .printer import format_place, format_program, format_statement
from .validate import Diagnostic, PlaceTypeError, assignable, place_type, validate_program
