//! Encodes and decodes a few messages and prints their bytes.
//! `cargo run --example wire`

use hyperion::wire::{payload, Message, Opcode, Status, FLAG_TIMING, HEX_EXAMPLE};

fn hexdump(bytes: &[u8]) {
    for row in bytes.chunks(16) {
        let cells: Vec<String> = row.iter().map(|b| format!("{b:02x}")).collect();
        println!("  {}", cells.join(" "));
    }
}

fn main() {
    let get = Message::request(Opcode::Get, 1, 2, 0x0102030405060708, payload::key(7));
    let bytes = get.encode();
    println!("GET key 7, tenant 1, slot 2:");
    hexdump(&bytes);
    assert_eq!(bytes, HEX_EXAMPLE);

    let back = Message::decode(&HEX_EXAMPLE).unwrap();
    println!("decoded: {back:?}");

    let mut timed = Message::request(Opcode::Put, 1, 2, 9, payload::put(7, &[0xAB; 128]));
    timed.reserved = FLAG_TIMING;
    println!(
        "\nPUT with timing flag: {} bytes on the wire",
        timed.encode().len()
    );

    let err = Message::reply(&get, Status::NotFound, Vec::new());
    println!("\nNotFound reply:");
    hexdump(&err.encode());

    for bad in [&HEX_EXAMPLE[..10], &[0u8; 24][..]] {
        println!(
            "decode {} bytes: {:?}",
            bad.len(),
            Message::decode(bad).unwrap_err()
        );
    }
    if let Some(h) = Message::recover_header(&HEX_EXAMPLE[..24]) {
        println!("header recovered from a truncated datagram: {h:?}");
    }
}
