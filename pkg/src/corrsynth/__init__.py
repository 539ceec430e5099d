"""Optimal correlation test systems: weighting design, stimulus/reference
co-synthesis, simulated correlation measurement and a lock-in baseline."""

from .dut import (Characteristic1D, CharacteristicMap2D, DynamicDut, auger_spectrum, estimate_bandwidth,
                  full_auger_current, nano_iv, sample_response)
from .errors import (AlignmentError, AliasingError, CalibrationError, ConfigError, CorrsynthError,
                     CoverageError, DesignError, DomainError, PackingError, ResolutionError)
from .lockin import LockinConfig, compare_systems, lockin_measure, restore_area, restore_curve
from .meter import ControlSweep, MeasurementConfig, measure, measure_dual, self_test, sweep
from .noise import (NoiseModel, TransducerTransfer, generate_noise, predict_variance_narrowband,
                    predict_variance_optimum, predict_variance_spectral)
from .synthesis import (ReferenceWaveform, StimulusSchedule, effective_weighting, synthesize_2d,
                        synthesize_continuous, synthesize_discrete, synthesize_dual, synthesize_dynamic,
                        synthesize_narrowband, verify_synthesis)
from .weighting import (ContinuousWeighting, DiscreteWeighting, Weighting2D, background_residual,
                        boxcar_with_end_deltas, chebyshev_comb, delta_minus_comb, moment_design)

__version__ = "0.1.0"
