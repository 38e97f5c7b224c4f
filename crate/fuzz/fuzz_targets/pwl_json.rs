#![no_main]

use boots_core::decode::{check, Decoder};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    check(Decoder::Pwl, data);
});
