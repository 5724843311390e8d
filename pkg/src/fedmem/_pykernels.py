"""Pure-numpy CIFG recurrence kernels.

Reference implementation of the time loop; the compiled module in
``_ckernels.pyx`` exposes the same two functions with the same array
contracts. All arrays are float64, time-major and C-contiguous.

Gate pre-activations are laid out as ``[forget | candidate | output]``
along the last axis, each block ``hidden`` wide.
"""

import numpy as np


def _sigmoid(x):
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def cifg_forward(xproj, w_h, h0, c0):
    """Run the coupled-gate LSTM over a batch.

    Args:
      xproj: (T, B, 3h) input projections ``x_t @ W_x + b``.
      w_h: (h, 3h) recurrent weights.
      h0, c0: (B, h) initial hidden and cell state.

    Returns:
      ``(gates, cells, tanh_cells, hiddens)`` with shapes (T, B, 3h) and
      (T, B, h). ``gates`` holds post-activation f, g, o.
    """
    steps, batch, three_h = xproj.shape
    hid = three_h // 3
    gates = np.empty_like(xproj)
    cells = np.empty((steps, batch, hid))
    tanh_cells = np.empty((steps, batch, hid))
    hiddens = np.empty((steps, batch, hid))
    h_prev = h0
    c_prev = c0
    for t in range(steps):
        z = xproj[t] + h_prev @ w_h
        f = _sigmoid(z[:, :hid])
        g = np.tanh(z[:, hid:2 * hid])
        o = _sigmoid(z[:, 2 * hid:])
        c = f * c_prev + (1.0 - f) * g
        tc = np.tanh(c)
        h = o * tc
        gates[t, :, :hid] = f
        gates[t, :, hid:2 * hid] = g
        gates[t, :, 2 * hid:] = o
        cells[t] = c
        tanh_cells[t] = tc
        hiddens[t] = h
        h_prev = h
        c_prev = c
    return gates, cells, tanh_cells, hiddens


def cifg_backward(dhiddens, w_h, gates, cells, tanh_cells, c0):
    """Backpropagate through time.

    Args:
      dhiddens: (T, B, h) loss gradient w.r.t. each emitted hidden state
        (excluding the recurrent path, which is accumulated here).
      w_h, gates, cells, tanh_cells, c0: as produced for/by ``cifg_forward``.

    Returns:
      (T, B, 3h) gradient w.r.t. the gate pre-activations.
    """
    steps, batch, hid = dhiddens.shape
    dz = np.empty((steps, batch, 3 * hid))
    dh_next = np.zeros((batch, hid))
    dc_next = np.zeros((batch, hid))
    w_h_t = w_h.T
    for t in range(steps - 1, -1, -1):
        f = gates[t, :, :hid]
        g = gates[t, :, hid:2 * hid]
        o = gates[t, :, 2 * hid:]
        tc = tanh_cells[t]
        c_prev = cells[t - 1] if t > 0 else c0
        dh = dhiddens[t] + dh_next
        dc = dh * o * (1.0 - tc * tc) + dc_next
        dz[t, :, :hid] = dc * (c_prev - g) * f * (1.0 - f)
        dz[t, :, hid:2 * hid] = dc * (1.0 - f) * (1.0 - g * g)
        dz[t, :, 2 * hid:] = dh * tc * o * (1.0 - o)
        dh_next = dz[t] @ w_h_t
        dc_next = dc * f
    return dz
