"""Compiled inner loop for the network ticks between two control events."""

import math

import numpy as np
from numba import njit

# Counter slots in the ``stats`` vector.
SENT, DELIVERED, DROPPED, IN_FLIGHT, LAT_SUM, MONITORED, MET, SENT_ACC, LYAP = range(9)
N_STATS = 9


@njit(cache=True)
def link_prob(snr_db, dist_m, gamma_th_db, d_max_m):
    a = 1.0 / (1.0 + math.exp(-(snr_db - gamma_th_db)))
    b = 1.0 / (1.0 + math.exp(-(d_max_m - dist_m)))
    return a * b


@njit(cache=True)
def success_prob(snr_db, gamma0_db, steepness, coding_gain):
    return coding_gain / (1.0 + math.exp(-steepness * (snr_db - gamma0_db)))


@njit(cache=True)
def network_ticks(
    t0, n, dt, duration, budget,
    noise, uni, gen, a_shadow, b_shadow,
    shadow, snr, adm, snr_mean, sig, in_range, dist, gamma_th, bandwidth,
    choice, buffer,
    rsu_q, fog_q, rsu_wait, fog_wait, route, backhaul_rf, rsu_mu, fog_mu,
    rsu_base, fog_base, load_cap, backoff, min_rate, d_max, steepness, coding_gain,
    bits, channel_success, infinite_rate,
    cost_hist, hist_n, zone_acc, stats, s_lat, s_pdr, s_rel,
):
    N, R = snr.shape
    F = fog_q.shape[0]
    A = buffer.shape[1]
    n_att = uni.shape[2]
    users = np.zeros(R)
    rsu_arr = np.zeros(R)
    fog_arr = np.zeros(F)
    downstream = np.zeros(R)
    tx = np.zeros(N, dtype=np.bool_)
    ok_link = np.zeros(N, dtype=np.bool_)
    pend = np.zeros(N)
    first = np.zeros(N, dtype=np.int64)
    rate = np.zeros(N)
    access = np.zeros(N)
    for tt in range(n):
        t = t0 + tt
        now = t * dt
        for i in range(N):
            for r in range(R):
                shadow[i, r] = a_shadow * shadow[i, r] + b_shadow * noise[tt, i, r]
                snr[i, r] = snr_mean[i, r] + sig[i, r] * shadow[i, r]
                # A fixed success probability replaces the SNR admission test.
                adm[i, r] = in_range[i, r] and (channel_success >= 0.0 or snr[i, r] >= gamma_th[r])

        k = gen[tt]
        if k > 0:
            for i in range(N):
                buffer[i, 0] += k
            stats[SENT] += N * k
            stats[SENT_ACC] += N * k

        # Link check; an inadmissible choice defers and switches links.
        for r in range(R):
            users[r] = 0.0
            rsu_arr[r] = 0.0
        n_active = 0
        for i in range(N):
            p_i = 0.0
            for a in range(A):
                p_i += buffer[i, a]
            pend[i] = p_i
            if p_i > 0:
                n_active += 1
            c = choice[i]
            ok = c >= 0 and adm[i, c]
            ok_link[i] = ok
            if not ok:
                best = -1
                best_p = -1.0
                for r in range(R):
                    if adm[i, r]:
                        lp = link_prob(snr[i, r], dist[i, r], gamma_th[r], d_max)
                        if lp > best_p:
                            best_p = lp
                            best = r
                if best >= 0:
                    choice[i] = best
            tx[i] = ok and p_i > 0
            if tx[i]:
                users[c] += 1.0

        tick_dropped = 0.0
        tick_delivered = 0.0
        tick_lat = 0.0
        tick_met = 0
        for i in range(N):
            first[i] = -1
            if not tx[i]:
                continue
            c = choice[i]
            if channel_success >= 0.0:
                p = channel_success
            else:
                p = success_prob(snr[i, c], gamma_th[c], steepness, coding_gain)
            for j in range(n_att):
                if uni[tt, i, j] < p:
                    first[i] = j
                    break
            if first[i] < 0:
                stats[DROPPED] += pend[i]
                tick_dropped += pend[i]
                for a in range(A):
                    buffer[i, a] = 0
                continue
            if infinite_rate:
                rate[i] = np.inf
                air = 0.0
            else:
                rate[i] = bandwidth[c] / users[c] * math.log2(1.0 + 10.0 ** (snr[i, c] / 10.0))
                air = pend[i] * bits / rate[i]
            access[i] = backoff[first[i]] + (first[i] + 1) * air
            rsu_arr[c] += pend[i]

        for r in range(R):
            zone_acc[r] += rsu_arr[r]
            rho = min(rsu_arr[r] / (rsu_mu[r] * dt), load_cap)
            rsu_wait[r] = rsu_q[r] / rsu_mu[r] + rsu_base / (1.0 - rho)
            rsu_q[r] = max(0.0, rsu_q[r] + rsu_arr[r] - rsu_mu[r] * dt)
        v_prev = 0.0
        v_next = 0.0
        drive = 0.0
        for f in range(F):
            s = 0.0
            for r in range(R):
                s += route[r, f] * rsu_arr[r]
            fog_arr[f] = s
            rho = min(s / (fog_mu[f] * dt), load_cap)
            fog_wait[f] = fog_q[f] / fog_mu[f] + fog_base[f] / (1.0 - rho)
            v_prev += (fog_q[f] / fog_mu[f]) ** 2
            fog_q[f] = max(0.0, fog_q[f] + s - fog_mu[f] * dt)
            v_next += (fog_q[f] / fog_mu[f]) ** 2
            drive += (s / fog_mu[f]) ** 2
        if v_next - v_prev > drive + 1e-12:
            stats[LYAP] += 1
        for r in range(R):
            s = 0.0
            for f in range(F):
                s += route[r, f] * (backhaul_rf[r, f] + fog_wait[f])
            downstream[r] = s

        slot = hist_n % cost_hist.shape[1]
        for i in range(N):
            if not tx[i]:
                cost_hist[i, slot] = 0.0 if ok_link[i] else dt / budget
                continue
            if first[i] < 0:
                cost_hist[i, slot] = backoff[n_att - 1] / budget + 1.0
                continue
            c = choice[i]
            fixed = access[i] + rsu_wait[c] + downstream[c]
            cost_hist[i, slot] = fixed / budget
            if now + fixed > duration:
                stats[IN_FLIGHT] += pend[i]
            else:
                worst = 0.0
                for a in range(A):
                    cnt = buffer[i, a]
                    if cnt > 0:
                        lat = a * dt + fixed
                        tick_lat += cnt * lat
                        tick_delivered += cnt
                        if lat > worst:
                            worst = lat
                if worst <= budget and rate[i] >= min_rate:
                    tick_met += 1
            for a in range(A):
                buffer[i, a] = 0
        hist_n += 1

        # Age the buffers; the oldest column expires.
        for i in range(N):
            exp_i = buffer[i, A - 1]
            if exp_i > 0:
                stats[DROPPED] += exp_i
                tick_dropped += exp_i
            for a in range(A - 1, 0, -1):
                buffer[i, a] = buffer[i, a - 1]
            buffer[i, 0] = 0

        stats[DELIVERED] += tick_delivered
        stats[LAT_SUM] += tick_lat
        stats[MONITORED] += n_active
        stats[MET] += tick_met
        if tick_delivered > 0:
            s_lat[t] = 1e3 * tick_lat / tick_delivered
        if tick_delivered + tick_dropped > 0:
            s_pdr[t] = 100.0 * tick_delivered / (tick_delivered + tick_dropped)
        if n_active > 0:
            s_rel[t] = 100.0 * tick_met / n_active
    return hist_n


@njit(cache=True)
def vehicle_decision(
    use_cvar, entangle, anneal,
    snr, in_range, adm, xy, psi, temp, cost_hist, hist_n, gamma_th, base, budget, dt,
    z, wq, pick_u, sig, steepness, coding_gain, backoff1, alpha,
    psi_eta, coupling, range_m, beta, tau,
):
    """Compiled twin of the vectorized decision step in ``engine``."""
    N, R = snr.shape
    S = z.shape[0]
    m = max(1, int(math.ceil((1.0 - alpha) * S - 1e-9)))
    score = np.empty((N, R))
    samples = np.empty(S)
    for i in range(N):
        for r in range(R):
            if not in_range[i, r]:
                score[i, r] = 10.0
                continue
            for s in range(S):
                x = snr[i, r] + sig[i, r] * z[s]
                p = coding_gain / (1.0 + math.exp(-steepness * (x - gamma_th[r])))
                lost = dt if x < gamma_th[r] else 0.0
                samples[s] = (base[r] * wq[s] + (1.0 - p) * backoff1 + lost) / budget
            if use_cvar:
                # Insertion sort; S is small.
                for a in range(1, S):
                    key = samples[a]
                    b = a - 1
                    while b >= 0 and samples[b] > key:
                        samples[b + 1] = samples[b]
                        b -= 1
                    samples[b + 1] = key
                acc = 0.0
                for s in range(S - m, S):
                    acc += samples[s]
                score[i, r] = acc / m
            else:
                score[i, r] = samples.mean()

    new = np.empty((N, R))
    for i in range(N):
        nrm = 0.0
        for r in range(R):
            v = max(psi[i, r], 1e-6) * math.exp(-psi_eta * score[i, r])
            new[i, r] = v
            nrm += v * v
        nrm = math.sqrt(nrm)
        for r in range(R):
            new[i, r] /= nrm
    if entangle:
        logs = np.empty((N, R))
        for j in range(N):
            for r in range(R):
                logs[j, r] = math.log1p(coupling * new[j, r])
        out = np.empty((N, R))
        r2 = range_m * range_m
        for i in range(N):
            acc = np.zeros(R)
            deg = 0
            for j in range(N):
                if j == i:
                    continue
                dx = xy[i, 0] - xy[j, 0]
                dy = xy[i, 1] - xy[j, 1]
                if dx * dx + dy * dy <= r2:
                    deg += 1
                    for r in range(R):
                        acc[r] += logs[j, r]
            deg = max(deg, 1)
            nrm = 0.0
            for r in range(R):
                v = max(new[i, r] * math.exp(acc[r] / deg), 1e-12)
                out[i, r] = v
                nrm += v * v
            nrm = math.sqrt(nrm)
            for r in range(R):
                out[i, r] /= nrm
        new = out

    if anneal and hist_n >= 2:
        H = min(hist_n, cost_hist.shape[1])
        for i in range(N):
            mean = 0.0
            for h in range(H):
                mean += cost_hist[i, h]
            mean /= H
            var = 0.0
            for h in range(H):
                var += (cost_hist[i, h] - mean) ** 2
            var /= H
            temp[i] = max(beta * temp[i] + (1.0 - beta) * var / (1.0 + var), 1e-6)

    choice = -np.ones(N, dtype=np.int64)
    final = np.empty(R)
    for i in range(N):
        tsum = 0.0
        for r in range(R):
            if adm[i, r]:
                tsum += new[i, r] * new[i, r]
        fmin = np.inf
        for r in range(R):
            if adm[i, r]:
                th = new[i, r] * new[i, r] / tsum if tsum > 0 else 0.0
                final[r] = score[i, r] - tau * math.log(max(th, 1e-12))
                if final[r] < fmin:
                    fmin = final[r]
        if fmin == np.inf:
            continue
        total = 0.0
        for r in range(R):
            if adm[i, r]:
                total += math.exp(-(final[r] - fmin) / temp[i])
        target = pick_u[i] * total
        cdf = 0.0
        pick = 0
        for r in range(R):
            if adm[i, r]:
                cdf += math.exp(-(final[r] - fmin) / temp[i])
            if cdf < target:
                pick = r + 1
        choice[i] = min(pick, R - 1)
    return choice, new, temp
