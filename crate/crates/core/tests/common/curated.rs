//! Hand-picked programs the verifier must reject (with the expected reason) or accept.

use hyperion::ebpf::VerifierErrorKind as K;

pub const INVALID: [(&str, K, &str); 20] = [
    ("infinite ja", K::UnboundedLoop, "mov r0, 0\nl: ja l\n"),
    ("loop without counter", K::UnboundedLoop, "mov r0, 0\nl:\nadd r0, 1\nja l\n"),
    ("counter never compared", K::UnboundedLoop, "mov r0, 0\nmov r1, 0\nl:\nadd r1, 1\njne r0, 1, l\nexit\n"),
    ("loop bound from packet", K::UnboundedLoop, "call 3\nmov r7, r0\nmov r1, 0\nl:\njeq r1, r7, out\nadd r1, 2\nja l\nout:\nmov r0, 0\nexit\n"),
    ("counting down from unknown", K::UnboundedLoop, "call 5\nmov r1, r0\nl:\njeq r1, 0, out\nsub r1, 1\nja l\nout:\nmov r0, 0\nexit\n"),
    ("self loop on branch", K::UnboundedLoop, "mov r0, 1\nl: jne r0, 0, l\nexit\n"),
    ("read r0 first", K::UninitializedRegister, "exit\n"),
    ("read r3", K::UninitializedRegister, "mov r0, r3\nexit\n"),
    ("uninit on one path", K::UninitializedRegister, "call 5\njeq r0, 0, +1\nmov r4, 1\nmov r0, r4\nexit\n"),
    ("arg clobbered by call", K::UninitializedRegister, "mov r1, 3\ncall 5\nmov r0, r1\nexit\n"),
    ("uninit store source", K::UninitializedRegister, "stxdw [r10-8], r7\nmov r0, 0\nexit\n"),
    ("packet read, no check", K::OutOfBoundsAccess, "ldxb r0, [r1+0]\nexit\n"),
    ("packet check off by one", K::OutOfBoundsAccess, "mov r6, r1\ncall 3\njlt r0, 7, +2\nldxdw r0, [r6+0]\nexit\nmov r0, 0\nexit\n"),
    ("stack below frame", K::OutOfBoundsAccess, "stdw [r10-520], 1\nmov r0, 0\nexit\n"),
    ("stack above frame", K::OutOfBoundsAccess, "ldxb r0, [r10+0]\nexit\n"),
    ("window past end", K::OutOfBoundsAccess, "ldxdw r0, [r2+4092]\nexit\n"),
    ("emit longer than stack", K::OutOfBoundsAccess, "mov r1, r10\nadd r1, -8\nmov r2, 16\ncall 4\nexit\n"),
    ("unknown helper", K::UnknownHelper, "call 99\nexit\n"),
    ("tenant range helper", K::UnknownHelper, "call 1024\nexit\n"),
    ("helper zero", K::UnknownHelper, "mov r0, 0\ncall 0\nexit\n"),
];

pub const VALID: [(&str, &str); 20] = [
    ("return constant", "mov r0, 7\nexit\n"),
    ("64-bit immediate", "lddw r0, 0x1122334455667788\nexit\n"),
    ("alu mix", "mov r0, 3\nmul r0, 5\nxor r0, 1\nlsh r0, 2\nrsh32 r0, 1\nexit\n"),
    ("division by nonzero constant", "call 5\ndiv r0, 3\nexit\n"),
    ("stack round trip", "mov r1, 9\nstxdw [r10-8], r1\nldxdw r0, [r10-8]\nexit\n"),
    ("byte stores", "stb [r10-1], 1\nstb [r10-2], 2\nldxh r0, [r10-2]\nexit\n"),
    ("checked packet read", "mov r6, r1\ncall 3\njlt r0, 8, +2\nldxdw r0, [r6+0]\nexit\nmov r0, 0\nexit\n"),
    ("check with jge", "mov r6, r1\ncall 3\njge r0, 4, +2\nmov r0, 0\nexit\nldxw r0, [r6+0]\nexit\n"),
    ("window access", "stdw [r2+4088], 5\nldxdw r0, [r2+4088]\nexit\n"),
    ("counted loop", "mov r0, 0\nmov r1, 0\nl:\njge r1, 10, out\nadd r0, r1\nadd r1, 1\nja l\nout:\nexit\n"),
    ("loop with 32-bit counter", "mov r0, 0\nmov32 r1, 0\nl:\njge32 r1, 5, out\nadd r0, 2\nadd32 r1, 1\nja l\nout:\nexit\n"),
    ("nested loops", "mov r0, 0\nmov r1, 0\na:\njge r1, 3, done\nmov r2, 0\nb:\njge r2, 4, next\nadd r0, 1\nadd r2, 1\nja b\nnext:\nadd r1, 1\nja a\ndone:\nexit\n"),
    ("echo", "mov r6, r1\ncall 3\nmov r2, r0\nmov r1, r6\ncall 4\nmov r0, 0\nexit\n"),
    ("emit from stack", "stdw [r10-8], 1\nmov r1, r10\nadd r1, -8\nmov r2, 8\ncall 4\nexit\n"),
    ("block read", "mov r6, r2\nmov r1, 0\nmov r2, 0\nmov r3, 0\ncall 1\nldxdw r0, [r6+0]\nexit\n"),
    ("time and kv route", "call 5\nmov r1, r0\ncall 6\nexit\n"),
    ("branches join", "call 5\njgt r0, 10, +2\nmov r1, 1\nja +1\nmov r1, 2\nmov r0, r1\nexit\n"),
    ("endian and neg", "lddw r0, 0x0102030405060708\nbe32 r0\nneg r0\nle16 r0\nexit\n"),
    ("signed compare", "mov r0, -1\njsgt r0, 0, +1\nmov r0, 1\nexit\n"),
    ("indexed packet read", "mov r6, r1\ncall 3\njlt r0, 16, +4\nmov r7, 3\nadd r6, r7\nldxb r0, [r6+8]\nexit\nmov r0, 0\nexit\n"),
];
