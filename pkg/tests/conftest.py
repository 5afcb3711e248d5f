"""Shared test configuration.

The trainer-heavy tests churn through large float64 temporaries; keeping
the malloc arena resident avoids paying page faults on every allocation
and cuts the slow tests' wall time severalfold.
"""

from bgnn.training import tune_allocator

tune_allocator()
