"""Stagewise regularized SGD, baselines, stability probes and diagnostics."""

from .core import (Dataset, RngStream, SparseExample, dataset_from_examples, dot,
                   draw_index, make_neighbor, sparse_dot, sparse_example)
from .geometry import FeasibleSet, l1_ball, l2_ball, project, prox_step, unconstrained
from .losses import (LossModel, QuadraticProblem, empirical_risk, estimate_sigma2,
                     fit_constants, full_gradient, huber, logistic, loss_gradient,
                     loss_value, make_quadratic_problem, make_quadratic_synthetic,
                     quadratic_loss, square, squared_hinge)
from .optim import DivergenceError, RunRecord, sgd_run, start_run, variant_run
from .schedules import (StageSchedule, StepSchedule, constant, convex_schedule,
                        geometric_decay, piecewise_constant, poly_inv_sqrt,
                        poly_one_over_t, quasi_convex_schedule, step_size,
                        weakly_convex_schedule)
from .stability import (ErrorDecomposition, StabilityTrace, TwinConfig,
                        bound_sgd_stability, bound_start_nonconvex_stability,
                        bound_start_stability, check_recurrence, decompose_error,
                        loss_gap_estimate, recurrence_bound, twin_run)
from .diagnostics import (AssumptionReport, ReferenceSolution, compute_reference,
                          hessian_vector_product, lanczos_min_eig, lanczos_smallest,
                          mu_ratio, theta_ratio)
from .data_io import (SplitSpec, dataset_hash, gen_classification, gen_quadratic,
                      parse_libsvm, serialize_libsvm, split)

__version__ = "0.1.0"
