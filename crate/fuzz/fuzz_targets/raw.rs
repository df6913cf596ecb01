#![no_main]

use crmn::data::{parse_raw, Split};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ds) = parse_raw(data, Split::Test) {
        ds.validate().expect("parsed dataset must be internally consistent");
    }
});
