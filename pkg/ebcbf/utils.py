"""Miscellaneous utilities"""
from hashlib import blake2b, sha1
import math
import re

import numpy as np
from scipy.stats import norm
from traitlets import Float, TraitError


def blake2b_hash_as_int(b):
    """Compute digest of the bytes `b` using the Blake2 hash function.

    Returns a unsigned 64bit integer.
    """
    return int.from_bytes(blake2b(b, digest_size=8).digest(), "big")


def rng_stream(seed, stream, index=0):
    """Random generator for one named stream derived from a single seed

    The generator is a counter-based Philox keyed by a digest of
    ``(seed, stream, index)``, so streams are independent of the order in
    which they are created and of which worker consumes them.
    """
    key = blake2b_hash_as_int(b"%d-%s-%d" % (int(seed), str(stream).encode(), int(index)))
    return np.random.Generator(np.random.Philox(key=key))


def git_blob_hash(data):
    """Content hash of `data` computed the way git hashes a blob"""
    if isinstance(data, str):
        data = data.encode("utf8")
    return sha1(b"blob %d\0" % len(data) + data).hexdigest()


def beta_from_eta(eta, points=1):
    """Band multiplier sqrt(2 ln(points / eta)) for a confidence level 1 - eta

    With ``points`` > 1 the pointwise level is split over that many
    evaluation points (union bound).
    """
    if not 0 < eta < 1:
        raise ValueError(f"eta must lie in (0, 1), got {eta}")
    if points < 1:
        raise ValueError(f"points must be >= 1, got {points}")
    return math.sqrt(2 * math.log(points / eta))


def eta_from_beta(beta, points=1):
    """Inverse of beta_from_eta"""
    return min(1.0, points * math.exp(-0.5 * beta ** 2))


class BandMultiplier(Float):
    """
    Allow specifying a credible-band multiplier by its confidence level

    Accepted values:
      - a non-negative number, taken as the multiplier itself
      - "eta=0.025", giving sqrt(2 ln(1/eta))
      - "eta=0.025,points=441", giving sqrt(2 ln(points/eta))
    """

    _pattern = re.compile(r"^\s*eta\s*=\s*([^,\s]+)\s*(?:,\s*points\s*=\s*(\d+)\s*)?$")

    def validate(self, obj, value):
        if isinstance(value, str):
            match = self._pattern.match(value)
            if not match:
                raise TraitError(
                    f"{value!r} is not a valid band multiplier. Must be a number"
                    " or a string like 'eta=0.025' or 'eta=0.025,points=441'"
                )
            try:
                value = beta_from_eta(float(match.group(1)), int(match.group(2) or 1))
            except ValueError as e:
                raise TraitError(str(e))
        value = super().validate(obj, value)
        if value < 0:
            raise TraitError(f"band multiplier must be >= 0, got {value}")
        return value


def wilson_interval(successes, trials, confidence=0.95):
    """Wilson score interval for a binomial proportion"""
    if trials <= 0:
        return 0.0, 1.0
    z = norm.ppf(0.5 + confidence / 2)
    phat = successes / trials
    denom = 1 + z ** 2 / trials
    center = (phat + z ** 2 / (2 * trials)) / denom
    half = z * math.sqrt(phat * (1 - phat) / trials + z ** 2 / (4 * trials ** 2)) / denom
    return max(0.0, center - half), min(1.0, center + half)
