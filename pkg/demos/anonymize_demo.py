"""
Prefix-preserving anonymization, step by step
=============================================

Run with ``python demos/anonymize_demo.py``.
"""
import random

from trafficforge.anonymizer import AnonymizationPolicy, MasterKey, RecordAnonymizer, anon_ip, derive_keyset
from trafficforge.logmodel import TSV, serialize_conn
from trafficforge.natural import generate_natural

# a fixed master key keeps the output stable between runs; use `trafficforge keygen` for real data
master = MasterKey.from_hex("ab" * 32)
keys = derive_keyset(master)

# addresses that share a prefix keep sharing exactly that many leading bits
pairs = [("10.1.2.3", "10.1.2.200"), ("10.1.2.3", "10.1.1.3"), ("10.1.2.3", "192.168.0.1")]
for a, b in pairs:
    print(f"{a:>12} -> {anon_ip(a, keys):<16} {b:>12} -> {anon_ip(b, keys)}")


def lcp(a, b):
    import ipaddress
    x, y = int(ipaddress.ip_address(a)), int(ipaddress.ip_address(b))
    return 32 - (x ^ y).bit_length()


for a, b in pairs:
    print(f"shared prefix {a} / {b}: {lcp(a, b)} bits before, {lcp(anon_ip(a, keys), anon_ip(b, keys))} after")

# IPv6 works the same way, over 128 bits
print("2001:db8::1 ->", anon_ip("2001:db8::1", keys))
print("2001:db8::2 ->", anon_ip("2001:db8::2", keys))

# whole records go through a policy: IPs are prefix-preserved, uids hashed, ports and bytes kept
anonymizer = RecordAnonymizer(AnonymizationPolicy.default(), keys)
rec = next(generate_natural(1, 1609459200.0, 60.0, seed=3))
print()
print("before:", serialize_conn(rec, TSV))
print("after: ", serialize_conn(anonymizer(rec), TSV))

# a different key gives unrelated output
other = derive_keyset(MasterKey.from_hex("ac" + "ab" * 31))
rng = random.Random(0)
ips = [f"10.{rng.randrange(256)}.{rng.randrange(256)}.{rng.randrange(256)}" for _ in range(1000)]
moved = sum(anon_ip(ip, keys) != anon_ip(ip, other) for ip in ips)
print(f"\nflipping one key bit changes {moved}/1000 anonymized addresses")
