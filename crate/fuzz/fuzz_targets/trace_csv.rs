#![no_main]

use libfuzzer_sys::fuzz_target;
use neural_duel::harness::{parse_trace_csv, trace_csv};

fuzz_target!(|data: &[u8]| {
    let Ok(traces) = parse_trace_csv(data) else {
        return;
    };
    if let Ok(bytes) = trace_csv(&traces) {
        let again = parse_trace_csv(&bytes).expect("written trace parses");
        assert_eq!(again.len(), traces.len());
        for (a, b) in again.iter().zip(&traces) {
            assert_eq!(a.rep, b.rep);
            assert_eq!(a.avg_regret_cum, b.avg_regret_cum);
            assert_eq!(a.weak_regret_cum, b.weak_regret_cum);
        }
    }
});
