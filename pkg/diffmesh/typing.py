""" Centrally defined type definitions. """

import typing as t

import numpy as np

Array = np.ndarray
Shape = t.Tuple[int, ...]
Line = t.Tuple[int, str]
Lines = t.Iterator[Line]
Timestep = int
