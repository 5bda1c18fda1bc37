import itertools
import threading

import numpy as np
import pytest

from qkdlink.cascade import (
    CascadeConfig,
    CascadeCorrector,
    CascadeResponder,
    ChannelIO,
    DirectIO,
    binary_bisect,
    cascade_reconcile,
    schedule_instances,
)
from qkdlink.netlink import MessageType, loopback_channel_pair
from qkdlink.pa import h2


def reconcile(bits_a, bits_b, qber, cfg=None, seed=1):
    return cascade_reconcile(
        bits_a, bits_b, cfg or CascadeConfig(), qber,
        shuffle_rng=np.random.default_rng(seed),
    )


class TestK1Rule:
    def test_rule_and_clamps(self):
        cfg = CascadeConfig()
        assert cfg.k1(0.01) == 73
        assert cfg.k1(0.043) == 17
        assert cfg.k1(0.3) == 8       # clamped up
        assert cfg.k1(1e-9) == 2**14  # clamped down
        assert cfg.k1(0.0) == 2**14


class TestHandTraceable:
    def test_identical_blocks_structural_leakage_only(self):
        # 1024 identical bits at QBER estimate 1 %: k1=73 so the four
        # iterations disclose ceil(1024/73)+ceil(1024/146)+ceil(1024/292)
        # +ceil(1024/584) = 15+8+4+2 = 29 parities and correct nothing
        rng = np.random.default_rng(0)
        bits = rng.integers(0, 2, 1024, dtype=np.uint8)
        out = reconcile(bits, bits.copy(), 0.01)
        assert out.residual_verified
        assert out.corrections == 0
        assert out.leaked_bits == 29
        np.testing.assert_array_equal(out.bits, bits)

    def test_8bit_single_error_iteration1_leakage(self):
        # k1=4 on 8 bits: 2 top parities + 2 bisection parities, for every
        # error position (exhaustive hand-traceable oracle)
        cfg = CascadeConfig(iterations=1, k1_min=4)
        rng = np.random.default_rng(1)
        for pos in range(8):
            bits_a = rng.integers(0, 2, 8, dtype=np.uint8)
            bits_b = bits_a.copy()
            bits_b[pos] ^= 1
            out = cascade_reconcile(bits_a, bits_b, cfg, qber_estimate=0.73 / 4)
            assert out.corrections == 1
            assert out.leaked_bits == 2 + 2, f"position {pos}"
            np.testing.assert_array_equal(out.bits, bits_a)
            assert out.residual_verified


class TestBinaryBisect:
    def ask_factory(self, bits_a):
        def ask(lo, hi):
            return int(bits_a[lo:hi].sum() & 1)
        return ask

    def test_16bit_found_in_4_exchanges(self):
        rng = np.random.default_rng(2)
        bits_a = rng.integers(0, 2, 16, dtype=np.uint8)
        bits_b = bits_a.copy()
        bits_b[9] ^= 1
        pos, used = binary_bisect(bits_b, 0, 16, self.ask_factory(bits_a))
        assert pos == 9
        assert used == 4

    def test_boundary_positions_all_found(self):
        rng = np.random.default_rng(3)
        for n in (8, 16, 21):
            for pos in range(n):
                bits_a = rng.integers(0, 2, n, dtype=np.uint8)
                bits_b = bits_a.copy()
                bits_b[pos] ^= 1
                found, _ = binary_bisect(bits_b, 0, n, self.ask_factory(bits_a))
                assert found == pos

    def test_odd_error_count_fixes_one(self):
        # 3 errors: exactly one is located; flipping it makes the segment
        # parity even (exhaustive over all weight-3 patterns on 8 bits)
        for positions in itertools.combinations(range(8), 3):
            bits_a = np.zeros(8, dtype=np.uint8)
            bits_b = bits_a.copy()
            for p in positions:
                bits_b[p] ^= 1
            found, _ = binary_bisect(bits_b, 0, 8, self.ask_factory(bits_a))
            assert found in positions
            bits_b[found] ^= 1
            assert int(bits_b.sum() & 1) == int(bits_a.sum() & 1)

    def test_equal_parities_precondition_error(self):
        bits = np.zeros(8, dtype=np.uint8)
        with pytest.raises(ValueError):
            binary_bisect(bits, 0, 8, self.ask_factory(bits), their_segment_parity=0)


class TestExhaustiveSmallBlocks:
    @pytest.mark.parametrize("k1", [2, 4])
    def test_all_weight_le2_patterns(self, k1):
        # every 8-bit error pattern of weight <= 2: whenever verification
        # passes the output equals Alice's block bit for bit
        cfg = CascadeConfig(iterations=4, k1_min=k1)
        qber = 0.73 / k1
        rng = np.random.default_rng(4)
        patterns = [()]
        patterns += [(i,) for i in range(8)]
        patterns += list(itertools.combinations(range(8), 2))
        for trial, pattern in enumerate(patterns):
            bits_a = rng.integers(0, 2, 8, dtype=np.uint8)
            bits_b = bits_a.copy()
            for p in pattern:
                bits_b[p] ^= 1
            out = cascade_reconcile(
                bits_a, bits_b, cfg, qber,
                shuffle_rng=np.random.default_rng(100 + trial),
            )
            if out.residual_verified:
                np.testing.assert_array_equal(out.bits, bits_a)
            else:
                # on a block this small the only patterns the parities can
                # never expose are two errors inside one iteration-1 block
                # (later iterations cover the whole key, so no shuffle can
                # split them); those must fail verification and be
                # discarded, never silently kept
                assert len(pattern) == 2
                assert pattern[0] // k1 == pattern[1] // k1


class TestMonteCarlo:
    def test_10kbit_blocks_residual_and_leakage(self):
        rng = np.random.default_rng(7)
        n = 10_000
        qber = 0.043
        bound = 1.25 * h2(qber)
        leaks = []
        for trial in range(20):
            bits_a = rng.integers(0, 2, n, dtype=np.uint8)
            flips = rng.random(n) < qber
            bits_b = bits_a ^ flips.astype(np.uint8)
            out = reconcile(bits_a, bits_b, qber, seed=trial)
            assert out.residual_verified, f"trial {trial} failed verification"
            np.testing.assert_array_equal(out.bits, bits_a)
            leaks.append(out.leaked_bits / n)
        assert np.mean(leaks) <= bound

    def test_rounds_bound(self):
        # interactivity: rounds stay within iterations * (1 + bisection
        # depth) plus the shuffle/verify handshakes
        rng = np.random.default_rng(8)
        n = 4096
        qber = 0.03
        bits_a = rng.integers(0, 2, n, dtype=np.uint8)
        bits_b = bits_a ^ (rng.random(n) < qber).astype(np.uint8)
        cfg = CascadeConfig()
        out = reconcile(bits_a, bits_b, qber, cfg)
        depth = int(np.ceil(np.log2(n)))
        handshakes = (cfg.iterations - 1) + 1  # shuffle seeds + verify
        assert out.rounds <= cfg.iterations * (1 + depth) + handshakes


class TestChannelTapLeakage:
    def test_leakage_matches_wire_parity_count(self):
        # leakage ledger exactness: the bits Bob counts equal the parity
        # bits a channel tap sees in PARITY_RESP frames
        rng = np.random.default_rng(9)
        n = 2048
        bits_a = rng.integers(0, 2, n, dtype=np.uint8)
        bits_b = bits_a ^ (rng.random(n) < 0.05).astype(np.uint8)
        cfg = CascadeConfig()
        ch_bob, ch_alice = loopback_channel_pair()
        responder = CascadeResponder(bits_a, cfg, instance=3)

        def serve():
            while True:
                frame = ch_alice.recv(timeout=10.0)
                if frame.type == MessageType.CONTROL:
                    return
                ch_alice.send(responder.handle(frame))

        t = threading.Thread(target=serve, daemon=True)
        t.start()
        io = ChannelIO(ch_bob, timeout=10.0)
        corr = CascadeCorrector(bits_b, 0.05, cfg, io, instance=3,
                                shuffle_rng=np.random.default_rng(10))
        out = corr.run()
        from qkdlink.netlink import Frame
        ch_bob.send(Frame(MessageType.CONTROL, b"done"))
        t.join(timeout=5.0)
        assert out.residual_verified
        np.testing.assert_array_equal(out.bits, bits_a)
        assert ch_bob.stats.parity_bits == out.leaked_bits


class TestScheduler:
    def _instances(self, count, n=512, qber=0.02, seed=11):
        rng = np.random.default_rng(seed)
        out = []
        for _ in range(count):
            a = rng.integers(0, 2, n, dtype=np.uint8)
            b = a ^ (rng.random(n) < qber).astype(np.uint8)
            out.append((a, b, qber))
        return out

    def test_single_instance_throughput(self):
        report = schedule_instances(self._instances(1), max_parallel=1)
        assert report.instances == 1
        assert report.verified == 1
        assert report.reconciled_bits == 512

    def test_throughput_nondecreasing_with_parallelism(self):
        instances = self._instances(16)
        lat = 0.002
        seq = schedule_instances(instances, max_parallel=1, latency_s=lat)
        par = schedule_instances(instances, max_parallel=8, latency_s=lat)
        assert par.verified == seq.verified == 16
        assert par.bits_per_second > seq.bits_per_second

    def test_invalid_parallelism(self):
        with pytest.raises(ValueError):
            schedule_instances([], max_parallel=0)
