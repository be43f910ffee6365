"""
The ebcbf application
"""
import json
import logging
import os
import sys

import jsonschema
import tornado.log
import tornado.options
from tornado.log import app_log
from traitlets import Bool, Float, List, TraitError, Unicode, default
from traitlets.config import Application

import numpy as np

from ._version import __version__
from .barrier import BarrierSpec, h_eb_batch, true_margin_batch
from .errors import EBCBFError, InputError, NumericalError
from .events import EventLog
from .gp import (
    Dataset,
    HyperparameterOptimizer,
    PhsGaussianProcess,
    energy_posterior,
    load_model,
    posterior_drift_batch,
    read_model_file,
    save_model,
    write_commented_csv,
)
from .metrics import write_metrics
from .safety_filter import FilterConfig
from .sim import (
    MassSpring,
    MonteCarlo,
    Simulation,
    StateGrid,
    generate_dataset,
    mc_safety_estimate,
    rollout_closed_loop,
)
from .utils import eta_from_beta, git_blob_hash

HERE = os.path.dirname(os.path.abspath(__file__))

CONFIGURABLES = [
    MassSpring,
    Simulation,
    StateGrid,
    HyperparameterOptimizer,
    PhsGaussianProcess,
    BarrierSpec,
    FilterConfig,
    MonteCarlo,
    EventLog,
]

CSV_SCHEMAS = """
Output files (CSV files start with '# config:' and '# input-hash:' lines):

  dataset.csv              t, q, p, u
  nlml_trace.csv           iteration, nlml
  posterior_grid.csv       q, p, mu_f1, mu_f2, sd_f1, sd_f2, mu_H, sd_H,
                           mu_T, sd_T, mu_V, sd_V, h_eb, true_margin
  trajectory_filtered.csv  t, q, p, u, h_eb, event
  trajectory_nominal.csv   t, q, p, u, h_eb, event
  model.json               hyperparameters, anchor, order, dataset path and hash
  mc_summary.json          safe_fraction, wilson_lo, wilson_hi, n_samples, config
  config.json              effective configuration, loadable with --config
"""


def config_echo(configurables):
    """Effective config=True trait values of every configurable, by class name

    Callables are left out; loading the result as a config file reproduces
    all other values.
    """
    echo = {}
    for obj in configurables:
        values = {}
        for name in sorted(obj.class_trait_names(config=True)):
            value = getattr(obj, name)
            if callable(value):
                continue
            values[name] = value
        echo[type(obj).__name__] = values
    return echo


def dumps_compact(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def file_hash(*paths):
    """git-style blob hash of the concatenated contents of input files"""
    content = b""
    for path in paths:
        with open(path, "rb") as f:
            content += f.read()
    return git_blob_hash(content)


class EbcbfCommand(Application):
    """Base class of the ebcbf subcommands"""

    version = __version__

    @default('log_level')
    def _log_level(self):
        return logging.INFO

    aliases = {
        'log-level': 'Application.log_level',
        'f': 'EbcbfCommand.config_file',
        'config': 'EbcbfCommand.config_file',
        'output-dir': 'EbcbfCommand.output_dir',
        'metrics-file': 'EbcbfCommand.metrics_file',
        'dataset': 'EbcbfCommand.dataset',
        'model': 'EbcbfCommand.model',
    }

    flags = {
        'debug': (
            {'EbcbfCommand': {'debug': True}},
            "Enable debug logging"
        )
    }

    classes = CONFIGURABLES

    config_file = Unicode(
        'ebcbf_config.json',
        help="""
        Config file to load (.json or .py).

        If a relative path is provided, it is taken relative to current directory
        """,
        config=True
    )

    output_dir = Unicode(
        '.',
        help="""Directory all outputs are written to""",
        config=True
    )

    metrics_file = Unicode(
        '',
        help="""
        Write Prometheus metrics of the run to this file.

        Empty disables metrics output.
        """,
        config=True
    )

    dataset = Unicode(
        '',
        help="""Dataset CSV to read (default: dataset.csv in output_dir)""",
        config=True
    )

    model = Unicode(
        '',
        help="""Model file to read (default: model.json in output_dir)""",
        config=True
    )

    debug = Bool(
        False,
        help="""Turn on debug logging""",
        config=True
    )

    @property
    def dataset_path(self):
        return self.dataset or os.path.join(self.output_dir, 'dataset.csv')

    @property
    def model_path(self):
        return self.model or os.path.join(self.output_dir, 'model.json')

    def initialize(self, *args, **kwargs):
        """Load configuration settings."""
        super().initialize(*args, **kwargs)
        if self.config_file:
            self.load_config_file(self.config_file)
            # command-line values take precedence over the config file
            self.update_config(self.cli_config)
        if self.debug:
            self.log_level = logging.DEBUG
        tornado.options.options.logging = logging.getLevelName(self.log_level)
        tornado.log.enable_pretty_logging()
        app_log.setLevel(self.log_level)
        self.log = app_log

        self.outputs = []
        self.system = MassSpring(parent=self)
        self.simulation = Simulation(parent=self)
        self.grid = StateGrid(parent=self)
        self.optimizer = HyperparameterOptimizer(parent=self)
        self.gp = PhsGaussianProcess(parent=self)
        self.barrier = BarrierSpec(parent=self)
        self.filter_config = FilterConfig(parent=self)
        self.monte_carlo = MonteCarlo(parent=self)
        self.event_log = EventLog(parent=self)
        self.echo = config_echo([
            self.system,
            self.simulation,
            self.grid,
            self.optimizer,
            self.gp,
            self.barrier,
            self.filter_config,
            self.monte_carlo,
        ])

    def output(self, name):
        """Path of an output file, tracked so failed runs can remove it"""
        os.makedirs(self.output_dir, exist_ok=True)
        path = os.path.join(self.output_dir, name)
        self.outputs.append(path)
        return path

    def comments(self, input_hash):
        return [f"config: {dumps_compact(self.echo)}", f"input-hash: {input_hash}"]

    def remove_outputs(self):
        for path in self.outputs:
            if os.path.exists(path):
                os.remove(path)
                self.log.info("removed partial output %s", path)

    def write_config(self):
        with open(self.output('config.json'), 'w') as f:
            json.dump(self.echo, f, indent=1, sort_keys=True)
            f.write('\n')

    def load_trained_model(self):
        """Rebuild the fitted model and its known structure from the model file"""
        path = self.model_path
        if not os.path.exists(path):
            raise InputError(f"model file {path} does not exist; run 'ebcbf fit' first")
        doc = read_model_file(path)
        if 'system' in doc:
            self.system = MassSpring(parent=self, **doc['system'])
        model = load_model(path, self.system.phs(), self.gp)
        input_hash = git_blob_hash(dumps_compact(doc).encode('utf8'))
        return model, input_hash

    def run(self):
        raise NotImplementedError()

    def start(self):
        try:
            self.run()
        except BaseException:
            self.remove_outputs()
            raise
        finally:
            if self.metrics_file:
                write_metrics(self.metrics_file)


class GenerateData(EbcbfCommand):
    """Simulate the benchmark and write a noisy, subsampled dataset"""

    name = 'ebcbf-gen-data'
    description = "Simulate the true system and write dataset.csv.\n" + CSV_SCHEMAS

    def run(self):
        dataset = generate_dataset(self.system, self.simulation)
        input_hash = git_blob_hash(dumps_compact(self.echo).encode('utf8'))
        path = self.output('dataset.csv')
        dataset.to_csv(path, self.comments(input_hash))
        self.write_config()
        self.log.info("wrote %i samples to %s", dataset.K, path)


class Fit(EbcbfCommand):
    """Fit the port-Hamiltonian GP to a dataset"""

    name = 'ebcbf-fit'
    description = "Fit hyperparameters and write model.json and nlml_trace.csv.\n" + CSV_SCHEMAS

    def run(self):
        path = self.dataset_path
        if not os.path.exists(path):
            raise InputError(f"dataset {path} does not exist; run 'ebcbf gen-data' first")
        dataset = Dataset.from_csv(path, state_dim=self.system.n)
        if dataset.K == 0:
            raise InputError(f"dataset {path} is empty; fitting needs at least one sample window")
        input_hash = file_hash(path)
        model = self.gp.fit(dataset, self.system.phs(), self.optimizer)

        model_path = self.output('model.json')
        dataset_ref = os.path.relpath(
            os.path.abspath(path), os.path.dirname(os.path.abspath(model_path))
        )
        save_model(
            model,
            model_path,
            dataset_ref,
            input_hash,
            gp_config=self.gp,
            extra={'system': self.system.to_dict(), 'config': self.echo},
        )
        trace = self.gp.trace
        write_commented_csv(
            self.output('nlml_trace.csv'),
            ['iteration', 'nlml'],
            trace,
            self.comments(input_hash),
        )
        self.write_config()
        best = min(value for _, value in trace) if trace else float('nan')
        self.event_log.emit('ebcbf/fit', 1, {
            'signal_variance': model.hp.signal_variance,
            'lengthscales': model.hp.lengthscales.tolist(),
            'observation_noise_variance': model.hp.observation_noise_variance,
            'nlml': best,
            'iterations': max(len(trace) - 1, 0),
            'order': model.ops.order,
            'samples': model.dataset.K,
        })
        self.log.info("fitted %s (nlml %.6g)", model.hp, best)


class EvalPosterior(EbcbfCommand):
    """Evaluate posterior surfaces of f, H, T and V on the state grid"""

    name = 'ebcbf-eval-posterior'
    description = "Write posterior_grid.csv for the fitted model.\n" + CSV_SCHEMAS

    def run(self):
        model, input_hash = self.load_trained_model()
        X = self.grid.states()
        mu_f, cov_f = posterior_drift_batch(model, X)
        sd_f = np.sqrt(np.maximum(np.diagonal(cov_f, axis1=1, axis2=2), 0.0))
        e = energy_posterior(model, X)
        h = h_eb_batch(self.barrier, model, X)
        margin = true_margin_batch(self.barrier, self.system, X)
        n = model.n
        header = (
            ['q', 'p'] if n == 2 else [f'x{i + 1}' for i in range(n)]
        ) + [f'mu_f{i + 1}' for i in range(n)] + [f'sd_f{i + 1}' for i in range(n)] + [
            'mu_H', 'sd_H', 'mu_T', 'sd_T', 'mu_V', 'sd_V', 'h_eb', 'true_margin'
        ]
        rows = np.column_stack([
            X, mu_f, sd_f,
            e.mu_H, np.sqrt(e.var_H), e.mu_T, np.sqrt(e.var_T), e.mu_V, np.sqrt(e.var_V),
            h, margin,
        ])
        write_commented_csv(self.output('posterior_grid.csv'), header, rows, self.comments(input_hash))
        self.write_config()
        inside = h >= 0
        if inside.any():
            self.log.info(
                "%i grid states in S_EB, %i of them outside the true allowable set",
                int(inside.sum()), int(np.sum(inside & (margin < 0))),
            )


class RunFilter(EbcbfCommand):
    """Closed-loop rollouts of the true system with and without the filter"""

    name = 'ebcbf-run-filter'
    description = "Write trajectory_filtered.csv and trajectory_nominal.csv.\n" + CSV_SCHEMAS

    x0 = List(
        Float(),
        [1.2, 0.0],
        help="""Initial state of both rollouts""",
        config=True
    )

    horizon = Float(
        10.0,
        help="""Rollout horizon (s)""",
        config=True
    )

    def run(self):
        model, input_hash = self.load_trained_model()
        cfg = self.filter_config
        m = model.phs.m
        common = dict(
            sim_cfg=self.simulation,
            spec=self.barrier,
            model=model,
            nominal=lambda x: cfg.nominal_control(x, m),
            horizon=self.horizon,
            system=self.system,
        )
        nominal = rollout_closed_loop(self.system, None, self.x0, **common)
        nominal.to_csv(self.output('trajectory_nominal.csv'), self.comments(input_hash))
        filtered = rollout_closed_loop(self.system, cfg, self.x0, **common)
        filtered.to_csv(self.output('trajectory_filtered.csv'), self.comments(input_hash))
        self.write_config()
        for label, traj in (('nominal', nominal), ('filtered', filtered)):
            self.log.info(
                "%s rollout: min h_EB %.4g, events %s",
                label, traj.min_h_eb, ', '.join(traj.event_names()) or 'none',
            )


class MonteCarloVerify(EbcbfCommand):
    """Monte-Carlo check of Bayesian forward invariance"""

    name = 'ebcbf-mc-verify'
    description = "Write mc_summary.json.\n" + CSV_SCHEMAS

    def run(self):
        model, input_hash = self.load_trained_model()
        mc = self.monte_carlo
        result = mc_safety_estimate(
            model,
            self.barrier,
            self.filter_config,
            mc.x0,
            mc.n_samples,
            mc.horizon,
            grid=self.grid,
            system=self.system,
            mc=mc,
        )
        beta_eb = self.barrier.band_multiplier()
        beta_f = self.filter_config.radius()
        summary = {
            'safe_fraction': result.safe_fraction,
            'wilson_lo': result.wilson_lo,
            'wilson_hi': result.wilson_hi,
            'confidence': mc.confidence,
            'n_samples': result.n_samples,
            'safe_count': result.safe_count,
            'true_safe_fraction': result.true_safe_fraction,
            'credible_fraction': result.credible_fraction,
            'events': result.events,
            'filtered': mc.filtered,
            'horizon': mc.horizon,
            'grid': self.grid.to_dict(),
            'beta_eb': beta_eb,
            'beta_f': beta_f,
            'input_hash': input_hash,
            'config': self.echo,
        }
        with open(os.path.join(HERE, 'file-schemas', 'summary.json')) as f:
            jsonschema.validate(summary, json.load(f))
        with open(self.output('mc_summary.json'), 'w') as f:
            json.dump(summary, f, indent=1, sort_keys=True)
            f.write('\n')
        self.write_config()
        target = 1 - (
            eta_from_beta(beta_f, max(1, self.filter_config.uniform_points))
            + eta_from_beta(beta_eb, max(1, self.barrier.uniform_points))
        )
        self.event_log.emit('ebcbf/mc-verify', 1, {
            'safe_fraction': result.safe_fraction,
            'wilson_lo': result.wilson_lo,
            'wilson_hi': result.wilson_hi,
            'n_samples': result.n_samples,
            'filtered': mc.filtered,
            'status': 'success' if result.wilson_hi >= target else 'failure',
        })


SUBCOMMANDS = {
    'gen-data': (GenerateData, GenerateData.description.splitlines()[0]),
    'fit': (Fit, Fit.description.splitlines()[0]),
    'eval-posterior': (EvalPosterior, EvalPosterior.description.splitlines()[0]),
    'run-filter': (RunFilter, RunFilter.description.splitlines()[0]),
    'mc-verify': (MonteCarloVerify, MonteCarloVerify.description.splitlines()[0]),
}


class EbcbfApp(Application):
    """Energy-aware Bayesian CBF experiments from the command line"""

    name = 'ebcbf'
    version = __version__
    description = "Learn port-Hamiltonian dynamics, filter inputs and verify safety.\n" + CSV_SCHEMAS
    subcommands = SUBCOMMANDS

    def start(self):
        if self.subapp is None:
            self.print_subcommands()
            raise InputError(f"a subcommand is required: {', '.join(SUBCOMMANDS)}")
        return self.subapp.start()


def run_command(argv=None):
    """Run one subcommand and return the process exit status

    0 on success, otherwise the exit code of the error class: 1 for input
    and configuration errors, 2 for numerical failures, 3 when the safety
    filter has no admissible input.
    """
    if argv is None:
        argv = sys.argv[1:]
    app = EbcbfApp()
    try:
        app.initialize(argv)
        app.start()
    except EBCBFError as e:
        app_log.error("%s: %s", type(e).__name__, e)
        return e.exit_code
    except np.linalg.LinAlgError as e:
        app_log.error("%s: %s", type(e).__name__, e)
        return NumericalError.exit_code
    except (TraitError, ValueError) as e:
        app_log.error("%s: %s", type(e).__name__, e)
        return 1
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else (0 if e.code is None else 1)
    finally:
        for cls in [cls for cls, _ in SUBCOMMANDS.values()] + [EbcbfApp]:
            if cls.initialized() and hasattr(cls.instance(), "event_log"):
                cls.instance().event_log.close()
            cls.clear_instance()
    return 0


def main():
    sys.exit(run_command())


if __name__ == '__main__':
    main()
