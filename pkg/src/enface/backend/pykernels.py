"""Pure-Python fallback for the compiled kernels.

Identical API to ``enface.backend._kernels``.  Arbitrary-precision numpy
object arrays keep 62-bit modular products exact; this is one to two orders
of magnitude slower than the compiled path and exists so the package works
on platforms without a C toolchain.  See ``enface.bench`` for a comparison.
"""

import numpy as np


def _obj(a):
    return a.astype(object)


def ntt_forward(a, psi_pows, w_pows, bitrev, q):
    n = a.shape[0]
    q = int(q)
    buf = np.empty(n, dtype=object)
    buf[bitrev] = (_obj(a) * _obj(psi_pows)) % q
    t = buf
    w_pows = _obj(w_pows)
    length = 2
    while length <= n:
        half = length >> 1
        stride = n // length
        t = t.reshape(n // length, length)
        u = t[:, :half]
        v = (t[:, half:] * w_pows[np.arange(half) * stride]) % q
        t = np.concatenate([(u + v) % q, (u - v) % q], axis=1).reshape(-1)
        length <<= 1
    a[:] = t.astype(np.uint64)


def ntt_inverse(a, ipsi_pows, iw_pows, bitrev, q):
    n = a.shape[0]
    q = int(q)
    buf = np.empty(n, dtype=object)
    buf[bitrev] = _obj(a)
    t = buf
    iw_pows = _obj(iw_pows)
    length = 2
    while length <= n:
        half = length >> 1
        stride = n // length
        t = t.reshape(n // length, length)
        u = t[:, :half]
        v = (t[:, half:] * iw_pows[np.arange(half) * stride]) % q
        t = np.concatenate([(u + v) % q, (u - v) % q], axis=1).reshape(-1)
        length <<= 1
    a[:] = ((t * _obj(ipsi_pows)) % q).astype(np.uint64)


def arr_addmod(out, a, b, q):
    np.copyto(out, ((_obj(a) + _obj(b)) % int(q)).astype(np.uint64))


def arr_submod(out, a, b, q):
    np.copyto(out, ((_obj(a) - _obj(b)) % int(q)).astype(np.uint64))


def arr_negmod(out, a, q):
    np.copyto(out, ((-_obj(a)) % int(q)).astype(np.uint64))


def arr_mulmod(out, a, b, q):
    np.copyto(out, ((_obj(a) * _obj(b)) % int(q)).astype(np.uint64))


def arr_mulmod_scalar(out, a, s, q):
    np.copyto(out, ((_obj(a) * int(s)) % int(q)).astype(np.uint64))


def arr_mac(acc, a, b, q):
    np.copyto(acc, ((_obj(acc) + _obj(a) * _obj(b)) % int(q)).astype(np.uint64))


def arr_mac_perm(acc, a, perm, b, q):
    ap = _obj(a)[perm]
    np.copyto(acc, ((_obj(acc) + ap * _obj(b)) % int(q)).astype(np.uint64))


def weighted_sum_mod(out, ys, scalars, q):
    q = int(q)
    acc = np.zeros(ys.shape[1], dtype=object)
    for i in range(ys.shape[0]):
        acc += (_obj(ys[i]) % q) * int(scalars[i])
    np.copyto(out, (acc % q).astype(np.uint64))
