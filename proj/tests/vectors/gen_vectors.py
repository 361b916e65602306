#!/usr/bin/env python3
"""Independent Python reference for the crypto test vectors.

Writes crypto_vectors.json next to this script. Uses only the standard
library: pow() for modular exponentiation, hashlib for SHA-256.
"""
import hashlib
import json
import os
import random

RFC3526_2048 = int(
    "FFFFFFFFFFFFFFFFC90FDAA22168C234C4C6628B80DC1CD129024E088A67CC74020BBEA63B139B22514A08798E3404DD"
    "EF9519B3CD3A431B302B0A6DF25F14374FE1356D6D51C245E485B576625E7EC6F44C42E9A637ED6B0BFF5CB6F406B7ED"
    "EE386BFB5A899FA5AE9F24117C4B1FE649286651ECE45B3DC2007CB8A163BF0598DA48361C55D39A69163FA8FD24CF5F"
    "83655D23DCA3AD961C62F356208552BB9ED529077096966D670C354E4ABC9804F1746C08CA18217C32905E462E36CE3B"
    "E39E772C180E86039B2783A2EC07A28FB5C55DF06F4C52C9DE2BCBF6955817183995497CEA956AE515D2261898FA0510"
    "15728E5A8AACAA68FFFFFFFFFFFFFFFF", 16)

GROUPS = {
    "toy": (23, 5),
    "safe64": (12118870745514474443, 4),
    "rfc3526-2048": (RFC3526_2048, 2),
}


def width(p):
    return (p.bit_length() + 7) // 8


def be(v, w):
    return v.to_bytes(w, "big")


def h_int(*parts):
    return int.from_bytes(hashlib.sha256(b"".join(parts)).digest(), "big")


def schnorr_sign(msg, sk, p, g):
    w = width(p)
    pk = pow(g, sk, p)
    k = h_int(be(sk, w), msg) % (p - 1)
    r = pow(g, k, p)
    e = h_int(be(r, w), be(pk, w), msg) % (p - 1)
    return r, (k + e * sk) % (p - 1)


def derive_seed(secret, p, label, q):
    d = hashlib.sha256(label.encode() + b"\x00" + be(secret, width(p))).digest()
    return int.from_bytes(d[:8], "big") % q


def main():
    rnd = random.Random(20240601)
    out = {"schema": 1, "dh": [], "shamir": [], "schnorr": [], "seed": []}

    for name, (p, g) in GROUPS.items():
        for _ in range(3):
            a, b = rnd.randint(1, p - 2), rnd.randint(1, p - 2)
            pa, pb = pow(g, a, p), pow(g, b, p)
            s = pow(pb, a, p)
            assert s == pow(pa, b, p)
            out["dh"].append({"group": name, "sk_a": str(a), "sk_b": str(b), "pk_a": str(pa),
                              "pk_b": str(pb), "shared": str(s)})
            for label, q in (("mask", 2**61 - 1), ("enc", 2**61 - 1), ("mask", 7919)):
                out["seed"].append({"group": name, "secret": str(s), "label": label,
                                    "modulus": str(q), "seed": str(derive_seed(s, p, label, q))})
        for i in range(2):
            sk = rnd.randint(1, p - 2)
            msg = bytes(rnd.randrange(256) for _ in range(5 + 7 * i))
            r, s = schnorr_sign(msg, sk, p, g)
            out["schnorr"].append({"group": name, "sk": str(sk), "pk": str(pow(g, sk, p)),
                                   "message_hex": msg.hex(), "r": str(r), "s": str(s)})

    for q, k, n in ((7919, 2, 3), (7919, 3, 5), (2**61 - 1, 3, 5), (2**61 - 1, 5, 9), (101, 4, 6)):
        coeffs = [rnd.randrange(q) for _ in range(k)]
        shares = []
        for x in range(1, n + 1):
            shares.append({"index": x, "value": str(sum(c * x**i for i, c in enumerate(coeffs)) % q)})
        out["shamir"].append({"modulus": str(q), "k": k, "n": n, "secret": str(coeffs[0]),
                              "shares": shares})

    path = os.path.join(os.path.dirname(os.path.abspath(__file__)), "crypto_vectors.json")
    with open(path, "w") as f:
        json.dump(out, f, indent=1)
        f.write("\n")


if __name__ == "__main__":
    main()
