#![no_main]

use crmn::training::{read_history_csv, write_history_csv};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(rows) = read_history_csv(data) {
        let mut out = Vec::new();
        write_history_csv(&rows, &mut out).expect("rows re-serialize");
    }
});
