import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from qkdlink.core import (
    ChannelPlan,
    ConfigError,
    CwdmBand,
    NUM_PAIR_SLOTS,
    Station,
    TagBatch,
    TelemetryRecord,
    channel_pair_transmission,
    loss_to_transmission,
    read_tag_file,
    transmission_to_loss,
    usable_slots,
    write_tag_file,
)


class TestLossToTransmission:
    def test_zero_loss_is_identity(self):
        assert loss_to_transmission(0.0) == 1.0

    def test_ten_db_is_factor_ten(self):
        assert loss_to_transmission(10.0) == pytest.approx(0.1, rel=1e-12)

    def test_33_5_db(self):
        # independent evaluation: 10**-3.35 = 4.4668e-4, and the
        # log/exp round trip must invert it
        assert loss_to_transmission(33.5) == pytest.approx(4.4668e-4, rel=1e-4)
        assert transmission_to_loss(loss_to_transmission(33.5)) == pytest.approx(33.5, rel=1e-12)

    def test_negative_loss_rejected(self):
        with pytest.raises(ValueError):
            loss_to_transmission(-1.0)

    @given(
        st.floats(min_value=0.0, max_value=60.0),
        st.floats(min_value=0.0, max_value=60.0),
    )
    def test_multiplicative_over_segments(self, l1, l2):
        combined = loss_to_transmission(l1 + l2)
        split = loss_to_transmission(l1) * loss_to_transmission(l2)
        assert combined == pytest.approx(split, rel=1e-12)

    def test_strictly_decreasing(self):
        losses = np.linspace(0, 70, 200)
        t = [loss_to_transmission(l) for l in losses]
        assert all(a > b for a, b in zip(t, t[1:]))


class TestChannelPlan:
    def setup_method(self):
        self.plan = ChannelPlan()

    def test_pairing_is_involution(self):
        for cid in range(2 * NUM_PAIR_SLOTS):
            assert self.plan.pairing(self.plan.pairing(cid)) == cid

    def test_paired_frequencies_symmetric_about_center(self):
        nu_c = self.plan.center_frequency_ghz
        for slot in (1, 7, 20, 40):
            nu_a, nu_b = self.plan.slot_frequencies_ghz(slot)
            # energy conservation: 1/lam_a + 1/lam_b = 2/lam_center
            assert nu_a + nu_b == pytest.approx(2 * nu_c, rel=1e-12)

    def test_center_slots_near_passband_maximum(self):
        # wide usable portion of the spectrum: a mid-band slot transmits
        # essentially the full DWDM passband
        passband = loss_to_transmission(self.plan.dwdm_insertion_db)
        t_a, t_b = channel_pair_transmission(self.plan, 10)
        assert t_a > 0.95 * passband
        assert t_b > 0.95 * passband

    def test_gap_slots_extinguished(self):
        # slots falling into the CWDM gaps transmit under 1% of the max
        products = {
            s: np.prod(channel_pair_transmission(self.plan, s))
            for s in range(1, NUM_PAIR_SLOTS + 1)
        }
        peak = max(products.values())
        dead = sorted(s for s, p in products.items() if p < 0.01 * peak)
        assert len(dead) == 4
        # holes adjacent to 1561 nm and to the 1541/1581 nm band edges
        for slot in dead:
            lam_a, lam_b = self.plan.slot_wavelengths_nm(slot)
            near_1561 = abs(lam_a - 1561.0) < 1.0
            near_1581 = abs(lam_a - 1581.0) < 1.2
            near_1541 = abs(lam_b - 1541.0) < 1.2
            assert near_1561 or near_1581 or near_1541

    def test_usable_slots_count(self):
        assert len(usable_slots(self.plan)) == 36

    def test_rectangular_infinite_bands_uniform(self):
        # no-edge limit: one huge ideal band per station -> all 40 slots equal
        plan = ChannelPlan(
            alice_bands=(CwdmBand(1580.0, width_nm=1000.0, edge_steepness_nm=0.0),),
            bob_bands=(CwdmBand(1540.0, width_nm=1000.0, edge_steepness_nm=0.0),),
        )
        values = [channel_pair_transmission(plan, s) for s in range(1, 41)]
        assert all(v == values[0] for v in values)

    def test_invalid_slot_raises(self):
        with pytest.raises(IndexError):
            channel_pair_transmission(self.plan, 0)
        with pytest.raises(IndexError):
            channel_pair_transmission(self.plan, 41)


class TestTagIO:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(1)
        t = np.sort(rng.integers(0, 2**60, 1000))
        ch = rng.integers(0, 4, 1000).astype(np.uint16)
        batch = TagBatch(Station.BOB, t, ch)
        path = tmp_path / "bob.tags"
        write_tag_file(path, batch)
        back = read_tag_file(path)
        assert back.station == Station.BOB
        np.testing.assert_array_equal(back.t, batch.t)
        np.testing.assert_array_equal(back.channel, batch.channel)

    def test_append_only(self, tmp_path):
        b1 = TagBatch(Station.ALICE, np.array([1, 2]), np.array([0, 1]))
        b2 = TagBatch(Station.ALICE, np.array([5, 9]), np.array([2, 3]))
        path = tmp_path / "alice.tags"
        write_tag_file(path, b1)
        write_tag_file(path, b2, append=True)
        back = read_tag_file(path)
        np.testing.assert_array_equal(back.t, [1, 2, 5, 9])

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.tags"
        path.write_bytes(b"\x00" * 64)
        with pytest.raises(ConfigError):
            read_tag_file(path)

    def test_batch_sorts_input(self):
        batch = TagBatch(Station.ALICE, np.array([5, 1, 3]), np.array([0, 1, 2]))
        np.testing.assert_array_equal(batch.t, [1, 3, 5])
        np.testing.assert_array_equal(batch.channel, [1, 2, 0])


class TestTelemetry:
    def test_fraction_bounds_enforced(self):
        rec = TelemetryRecord(sim_time_s=0.0, qber_z=0.7)
        with pytest.raises(ValueError):
            rec.validate()

    def test_csv_row_matches_header_width(self):
        rec = TelemetryRecord(sim_time_s=1.5, qber_z=0.043)
        assert len(rec.to_csv_row().split(",")) == len(
            TelemetryRecord.csv_header().split(",")
        )
