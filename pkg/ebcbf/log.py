"""logging utilities"""

import logging

from tornado.log import app_log


def log_fit_iteration(iteration, iterations, nlml, best, log_interval=50, log=app_log):
    """log optimizer progress

    - every iteration at debug-level
    - every `log_interval` iterations, the first and the last at info-level
    """
    if iteration in (0, iterations) or (log_interval and iteration % log_interval == 0):
        log_level = logging.INFO
    else:
        log_level = logging.DEBUG
    log.log(
        log_level,
        "iteration %i/%i: nlml=%.6g (best %.6g)",
        iteration,
        iterations,
        nlml,
        best,
    )


def log_filter_step(t, solution, log=app_log):
    """log a safety filter evaluation at a level chosen by its outcome

    - inactive steps at debug-level
    - interventions at debug-level, or info-level when the correction is large
    - degenerate steps where the input cannot act on the barrier at warning-level
    """
    if solution.degenerate:
        log_level = logging.WARNING
        msg = "t=%.4fs: barrier not actuated at h=%.4g, holding nominal input"
        args = (t, solution.h)
    else:
        correction = float(abs(solution.u - solution.u_nom).max()) if solution.u.size else 0.0
        if solution.active and correction >= 1.0:
            log_level = logging.INFO
        else:
            log_level = logging.DEBUG
        msg = "t=%.4fs: h=%.4g psi=%.4g active=%s correction=%.4g"
        args = (t, solution.h, solution.psi, solution.active, correction)
    log.log(log_level, msg, *args)
