#![no_main]

use crmn::training::parse_schedule;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(shifts) = parse_schedule(data) {
        assert!(shifts.iter().all(|s| s.epoch > 0 && s.lr > 0.0));
    }
});
