"""Text I/O conventions: ``,`` separated, ``\\n`` endings, 17 significant digits."""
import csv
import os

import numpy as np


def fmt(value):
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    return str(value)


def write_csv(path, header, rows, comments=()):
    """Write ``rows`` under ``header``; ``comments`` go first as ``# key=value`` lines."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for line in comments:
            fh.write(f"# {line}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt(v) for v in row])
        fh.flush()
        os.fsync(fh.fileno())


def read_csv(path):
    """Return ``(comments, header, float_matrix)``; comment lines are ``key=value``."""
    comments = {}
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    body = []
    for line in lines:
        if line.startswith("#"):
            key, _, val = line[1:].strip().partition("=")
            comments[key.strip()] = val.strip()
        elif line:
            body.append(line)
    header = body[0].split(",")
    data = np.array([[float(v) for v in row.split(",")] for row in body[1:]], dtype=float)
    return comments, header, data.reshape(len(body) - 1, len(header))
