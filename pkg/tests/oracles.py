"""Naive scalar-loop reference implementations used as test oracles."""
import math


def flat(img):
    return [float(v) for v in img.flatten().tolist()]


def mse_loop(a, b):
    xs, ys = flat(a), flat(b)
    total = 0.0
    for x, y in zip(xs, ys):
        total += (x - y) ** 2
    return total / len(xs)


def psnr_loop(a, b, peak=1.0):
    return 20 * math.log10(peak) - 10 * math.log10(mse_loop(a, b))


def ssim_loop(a, b, L=1.0, k1=0.01, k2=0.03):
    c1, c2 = (k1 * L) ** 2, (k2 * L) ** 2
    out = []
    for ch in range(a.shape[0]):
        xs, ys = flat(a[ch]), flat(b[ch])
        n = len(xs)
        mx = sum(xs) / n
        my = sum(ys) / n
        vx = sum((x - mx) ** 2 for x in xs) / n
        vy = sum((y - my) ** 2 for y in ys) / n
        cxy = sum((x - mx) * (y - my) for x, y in zip(xs, ys)) / n
        out.append(((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return sum(out) / len(out)


def ncc_loop(a, b):
    xs, ys = flat(a), flat(b)
    dot = sum(x * y for x, y in zip(xs, ys))
    return dot / (math.sqrt(sum(x * x for x in xs)) * math.sqrt(sum(y * y for y in ys)))
