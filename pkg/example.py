# Example usage of tcs_fedsim

import numpy as np

from tcs_fedsim import (
    CompressorConfig,
    ErrorState,
    LayerLayout,
    ParamVector,
    QuantizerSpec,
    RoundTrace,
    bit_budget,
    decode_payload,
    encode_payload,
    hamming_distance,
    run_experiment,
    setup_logging,
    tcs_compress,
    tcs_global_mask,
)
from tcs_fedsim.config import build_experiment_config


def demonstrate_compression():
    """Compress one update with TCS and ship it through the codec"""
    print("\n=== TCS Compression Demo ===")

    layout = LayerLayout((150, 50), ("weights", "bias"))
    rng = np.random.default_rng(0)
    comp = CompressorConfig("tcs", phi_global=0.05, phi_local=0.01)

    # Every client derives the same global mask from the last broadcast update
    last_broadcast = ParamVector(rng.standard_normal(layout.d), layout)
    global_mask = tcs_global_mask(last_broadcast, comp.k_global(layout.d), comp.fairness, comp.phi_min_global)
    print(f"Global mask: {global_mask.popcount} of {layout.d} entries")

    update = ParamVector(rng.standard_normal(layout.d), layout)
    sent, err = tcs_compress(update, global_mask, comp, ErrorState.zeros(layout))
    print(f"Sent {sent.k_global} global values and {sent.k_local} positioned local values")
    print(f"Residual keeps {err.residual.support().size} entries for the next round")

    spec = QuantizerSpec("fractional", 16)
    payload = encode_payload(sent, spec, comp.phi_local, round=0)
    wire = payload.to_bytes()
    print(f"Payload: {len(wire)} bytes ({payload.bit_length} bits, {spec.bits_per_value} bits per value)")

    received = decode_payload(wire, global_mask)
    idx = sent.mask.indices
    agree = np.sign(received.to_dense().values[idx]) == np.sign(sent.to_dense().values[idx])
    print(f"Decoded {received.support_size} entries, signs preserved: {bool(agree.all())}")


def demonstrate_bit_budget():
    """Compare analytic uplink costs of the supported schemes"""
    print("\n=== Bit Budget Demo ===")

    rows = [
        ("dense", dict(scheme="dense", q=32, phi_global=1.0)),
        ("top-K", dict(scheme="topk", q=32, phi_global=0.01)),
        ("rand-K", dict(scheme="randk", q=32, phi_global=0.01)),
        ("TCS", dict(scheme="tcs", q=32, phi_global=0.01, phi_local=0.001)),
        ("TCS-L4-Q5", dict(scheme="tcs", q=5, phi_global=0.01, phi_local=0.001, local_steps=4)),
    ]
    for name, kwargs in rows:
        print(f"{name:>10}: {bit_budget(**kwargs):.5f} bits per parameter per iteration")


def demonstrate_simulation():
    """Run a small TCS experiment and watch the global mask drift"""
    print("\n=== Simulation Demo ===")

    cfg = build_experiment_config(
        dict(
            seed=3,
            num_clients=4,
            local_steps=1,
            epochs=5,
            batch_size=16,
            scheme="tcs",
            phi_global=0.2,
            phi_local=0.05,
            base_lr=0.2,
            reference_batch=64,
            warmup_epochs=0,
            milestones=[],
            weight_decay=0.0,
            model="logreg",
            dataset="synthetic",
            num_classes=3,
            num_features=5,
            num_samples=400,
            cluster_spread=0.5,
            test_fraction=0.25,
        )
    )

    previous = {}

    def watch(trace: RoundTrace) -> None:
        mask = trace.global_mask
        if mask is not None and previous.get("mask") is not None and trace.round % 5 == 0:
            print(f"Round {trace.round}: global mask moved by {hamming_distance(previous['mask'], mask)} entries")
        previous["mask"] = mask

    log = run_experiment(cfg, on_round=watch)
    last = log.last
    print(f"Finished {len(log)} rounds: loss {last.train_loss:.4f}, test accuracy {last.test_accuracy:.3f}")
    print(f"Uplink: {last.uplink_bits_per_param_per_iter:.4f} bits per parameter per iteration")


def main():
    """Main example function"""
    setup_logging("WARNING")

    print("tcs_fedsim example")
    print("=" * 50)

    demonstrate_compression()
    demonstrate_bit_budget()
    demonstrate_simulation()

    print("\n=== Example completed successfully! ===")


if __name__ == "__main__":
    main()
