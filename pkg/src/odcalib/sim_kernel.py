"""JIT-compiled tick loop for the cell plant.

Same arithmetic, op order and tie-breaking as the pure-numpy path in
``sim.step_interval``, so both backends produce identical integer states.
Stochastic draws (Poisson arrivals) and the signal schedule are prepared by
the caller; the kernel itself is deterministic.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def _lr_split(total, weights, out, frac):
    """Largest-remainder split of ``total`` proportional to integer weights.

    Ties go to the lower index.  ``out`` and ``frac`` are scratch arrays at
    least as long as ``weights``; allocation never exceeds a weight.
    """
    m = weights.shape[0]
    wsum = 0
    for i in range(m):
        wsum += weights[i]
    if wsum <= 0 or total <= 0:
        for i in range(m):
            out[i] = 0
        return
    rem = total
    for i in range(m):
        q = total * (weights[i] / wsum)
        b = int(np.floor(q))
        out[i] = b
        frac[i] = q - b
        rem -= b
    for _ in range(rem):
        best = -1
        best_frac = -1.0
        for i in range(m):
            if frac[i] > best_frac:
                best_frac = frac[i]
                best = i
        out[best] += 1
        frac[best] = -2.0


@njit(cache=True)
def run_ticks(n, out_credit, in_credit, source_queue, entered, exited,
              elapsed_ticks,
              arrivals, gate_sched, gate_cells,
              travel_frac, cap_dt, wave_frac, jam_storage, jam_floor,
              base_jam, nxt,
              claims_ptr, claims_src,
              entry_cell, entry_ptr, entry_od,
              det_cells, det_count_acc, det_flow_acc,
              paranoid):
    """Advance ``arrivals.shape[0]`` ticks in place; returns updated counters.

    Mutates n, credits, source_queue and the detector accumulators.  Returns
    (entered, exited, elapsed_ticks).
    """
    ticks = arrivals.shape[0]
    n_cells, n_od = n.shape
    n_det = det_cells.shape[0]
    n_entry = entry_cell.shape[0]

    gate = np.ones(n_cells)
    n_tot = np.zeros(n_cells, dtype=np.int64)
    sendable = np.zeros(n_cells, dtype=np.int64)
    receivable = np.zeros(n_cells, dtype=np.int64)
    recv_budget = np.zeros(n_cells)
    inflow = np.zeros(n_cells, dtype=np.int64)
    desired = np.zeros((n_cells, n_od), dtype=np.int64)
    scratch_alloc = np.zeros(max(n_od, claims_src.shape[0] + 1), dtype=np.int64)
    scratch_frac = np.zeros(max(n_od, claims_src.shape[0] + 1))
    scratch_w = np.zeros(max(n_od, claims_src.shape[0] + 1), dtype=np.int64)

    for k in range(ticks):
        for j in range(gate_cells.shape[0]):
            gate[gate_cells[j]] = gate_sched[k, j]
        for p in range(n_od):
            source_queue[p] += arrivals[k, p]

        for c in range(n_cells):
            tot = 0
            for p in range(n_od):
                tot += n[c, p]
            n_tot[c] = tot

            send_f = tot * travel_frac[c]
            if cap_dt[c] < send_f:
                send_f = cap_dt[c]
            acc = send_f + out_credit[c]
            allow = np.floor(acc)
            out_credit[c] = acc - allow
            s = int(allow * gate[c])
            if tot < s:
                s = tot
            sendable[c] = s

            rb = wave_frac[c] * (jam_storage[c] - tot)
            if cap_dt[c] < rb:
                rb = cap_dt[c]
            if rb < 0.0:
                rb = 0.0
            rb += in_credit[c]
            recv_budget[c] = rb
            room = jam_floor[c] - tot
            if room < 0.0:
                room = 0.0
            rc = int(np.floor(rb))
            if int(room) < rc:
                rc = int(room)
            receivable[c] = rc

        # commodity split of each cell's sendable
        for c in range(n_cells):
            s = sendable[c]
            if s == n_tot[c]:
                for p in range(n_od):
                    desired[c, p] = n[c, p]
            elif s == 0:
                for p in range(n_od):
                    desired[c, p] = 0
            else:
                _lr_split(s, n[c], scratch_alloc, scratch_frac)
                for p in range(n_od):
                    desired[c, p] = scratch_alloc[p]

        # inflow per target cell
        for c in range(n_cells):
            inflow[c] = 0
        for c in range(n_cells):
            for p in range(n_od):
                d = desired[c, p]
                if d > 0:
                    t = nxt[c, p]
                    if t >= 0:
                        inflow[t] += d

        # ration oversubscribed targets among their claiming (cell, od) slots
        for t in range(n_cells):
            if inflow[t] > receivable[t]:
                a = claims_ptr[t]
                b = claims_ptr[t + 1]
                m = b - a
                for i in range(m):
                    pos = claims_src[a + i]
                    scratch_w[i] = desired[pos // n_od, pos % n_od]
                _lr_split(receivable[t], scratch_w[:m], scratch_alloc,
                          scratch_frac)
                for i in range(m):
                    pos = claims_src[a + i]
                    desired[pos // n_od, pos % n_od] = scratch_alloc[i]
                inflow[t] = receivable[t]

        # apply moves
        for c in range(n_cells):
            for p in range(n_od):
                m = desired[c, p]
                if m > 0:
                    n[c, p] -= m
                    t = nxt[c, p]
                    if t >= 0:
                        n[t, p] += m
                    else:
                        exited += m

        # inject queued arrivals at entry cells
        for e in range(n_entry):
            cell = entry_cell[e]
            a = entry_ptr[e]
            b = entry_ptr[e + 1]
            total_q = 0
            for i in range(a, b):
                total_q += source_queue[entry_od[i]]
            if total_q == 0:
                continue
            space = receivable[cell] - inflow[cell]
            if space <= 0:
                continue
            if total_q <= space:
                for i in range(a, b):
                    od = entry_od[i]
                    q = source_queue[od]
                    if q > 0:
                        n[cell, od] += q
                        source_queue[od] = 0
                        inflow[cell] += q
                        entered += q
            else:
                m = b - a
                for i in range(m):
                    scratch_w[i] = source_queue[entry_od[a + i]]
                _lr_split(space, scratch_w[:m], scratch_alloc, scratch_frac)
                for i in range(m):
                    take = scratch_alloc[i]
                    if take > 0:
                        od = entry_od[a + i]
                        source_queue[od] -= take
                        n[cell, od] += take
                        inflow[cell] += take
                        entered += take

        # bank unused receiving allowance, capped at one vehicle
        for c in range(n_cells):
            ic = recv_budget[c] - inflow[c]
            if ic > 1.0:
                ic = 1.0
            in_credit[c] = ic

        for d in range(n_det):
            cell = det_cells[d]
            tot = 0
            fl = 0
            for p in range(n_od):
                tot += n[cell, p]
                fl += desired[cell, p]
            det_count_acc[d] += tot
            det_flow_acc[d] += fl

        elapsed_ticks += 1

        if paranoid:
            in_net = 0
            for c in range(n_cells):
                tot = 0
                for p in range(n_od):
                    if n[c, p] < 0:
                        raise AssertionError("negative cell count")
                    tot += n[c, p]
                if tot > base_jam[c] + 1e-9:
                    raise AssertionError("cell count exceeds base jam storage")
                in_net += tot
            if entered - exited - in_net != 0:
                raise AssertionError("vehicle conservation violated")

    return entered, exited, elapsed_ticks
