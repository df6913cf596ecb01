#![no_main]

use crmn::data::{parse_cifar, CifarVariant, Split};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    for variant in [CifarVariant::C10, CifarVariant::C100] {
        if let Ok(ds) = parse_cifar(data, variant, Split::Train) {
            assert_eq!(ds.len() * variant.record_len(), data.len());
        }
    }
});
