#![no_main]

use crmn::checkpoint::Checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = Checkpoint::parse(data) {
        let again = ck.to_bytes().expect("a parsed checkpoint re-encodes");
        let back = Checkpoint::parse(&again).expect("re-encoded checkpoint parses");
        assert_eq!(back.tensors, ck.tensors);
    }
});
