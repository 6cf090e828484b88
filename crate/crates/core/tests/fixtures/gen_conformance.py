#!/usr/bin/env python3
"""Writes conformance.txt from an independent implementation of the byte layouts.

Uses only hashlib/hmac and the `cryptography` package, never the Rust code.
Run once; the output is committed.
"""
import hashlib
import hmac
import struct
from pathlib import Path

from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305

SEED = bytes([0x42] * 32)


def field(v):
    if isinstance(v, int):
        payload = struct.pack(">q", v)
    elif isinstance(v, str):
        payload = v.encode()
    else:
        payload = v
    return struct.pack(">I", len(payload)) + payload


def canon(tag, fields):
    t = tag.encode("ascii")
    return struct.pack(">I", len(t)) + t + b"".join(field(f) for f in fields)


def spec(fields):
    if not fields:
        return "-"
    out = []
    for f in fields:
        if isinstance(f, int):
            out.append(f"i:{f}")
        elif isinstance(f, str):
            out.append("s:" + f.encode().hex())
        else:
            out.append("b:" + f.hex())
    return ",".join(out)


def main():
    key = Ed25519PrivateKey.from_private_bytes(SEED)
    lines = [
        "# kind\tinputs...\texpected",
        f"# signer_seed\t{SEED.hex()}",
    ]
    canon_cases = [
        ("T", []),
        ("T", ["A"]),
        ("T", [1]),
        ("T", [b"\x00" * 7 + b"\x01"]),
        ("T", [-1]),
        ("T", [0, ""]),
        ("AUTHv1", ["auth-0001", "controller", 9223372036854775807, -9223372036854775808]),
        ("REQv1", [b"", "req", b"\xff\x00"]),
        ("LOGv1", [0, bytes(32), bytes(range(32)), b"\xab" * 32, 1700000000]),
        ("MANIv1", ["prog", "TAX_AUDIT", "read", "tax", "financial"]),
        ("SIXTEENCHARSTAG_", ["é中"]),
    ]
    for tag, fields in canon_cases:
        enc = canon(tag, fields)
        sig = key.sign(enc)
        lines.append("\t".join(["canon", tag, spec(fields), enc.hex(), hashlib.sha256(enc).hexdigest(), sig.hex()]))

    prf_cases = [
        (bytes(32), "VID|tax", b"\x00" * 24),
        (bytes(range(32)), "VID|health", bytes(range(24))),
        (b"\x11" * 32, "d", b""),
    ]
    for k, tag, msg in prf_cases:
        out = hmac.new(k, canon(tag, [msg]), hashlib.sha256).hexdigest()
        lines.append("\t".join(["prf", k.hex(), tag, msg.hex() or "-", out]))

    for secret, master, domain, counter in [
        (bytes(range(32)), bytes(range(16)), "tax", 0),
        (bytes(range(32)), bytes(range(16)), "health", 0),
        (bytes(range(32)), bytes(range(16)), "tax", 1),
        (b"\xfe" * 32, b"\x01" * 16, "consent", 0),
    ]:
        msg = master + struct.pack(">Q", counter)
        tag = hmac.new(secret, canon("VID|" + domain, [msg]), hashlib.sha256).digest()
        vid = int.from_bytes(tag[:8], "big") % 10**20
        lines.append("\t".join(["vid", secret.hex(), master.hex(), domain, str(counter), f"{vid:020d}"]))

    prev = bytes(32)
    for i, payload in enumerate([b"first", b"second", b"third"]):
        entry = canon("LOGv1", [i, payload])
        out = hashlib.sha256(canon("LOGv1", [prev, entry])).digest()
        lines.append("\t".join(["chain", prev.hex(), entry.hex(), out.hex()]))
        prev = out

    ctrl, reg = b"\x01" * 32, b"\x02" * 32
    data_key = hashlib.sha256(canon("KEYv1", [ctrl, reg])).digest()
    lines.append("\t".join(["combine", ctrl.hex(), reg.hex(), data_key.hex()]))

    record_id = "rec-0011223344556677"
    nonce = hashlib.sha256(canon("NONCEv1", [record_id])).digest()[:12]
    aad = canon("RECv1", [record_id, "tax", 42])
    plaintext = canon("FLDv1", ["income", "52000"])
    ct = ChaCha20Poly1305(data_key).encrypt(nonce, plaintext, aad)
    lines.append("\t".join(["aead", data_key.hex(), record_id, aad.hex(), plaintext.hex(), ct.hex()]))

    out = Path(__file__).with_name("conformance.txt")
    out.write_text("\n".join(lines) + "\n")


if __name__ == "__main__":
    main()
