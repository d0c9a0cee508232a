#![no_main]

use libfuzzer_sys::fuzz_target;
use agentguard::a2m::{encode_frame, FrameDecoder};

fuzz_target!(|data: &[u8]| {
    // The first byte picks where the stream is split in two reads.
    let Some((sel, data)) = data.split_first() else { return };
    let cut = *sel as usize % (data.len() + 1);
    let mut dec = FrameDecoder::new(4096);
    dec.push(&data[..cut]);
    dec.push(&data[cut..]);
    while let Ok(Some(frame)) = dec.next_frame() {
        assert!(frame.len() <= 4096);
        let again = encode_frame(&frame).unwrap();
        assert_eq!(&again[4..], &frame[..]);
    }
});
