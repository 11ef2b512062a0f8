use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::Arc;

use fedloom::clock::ManualClock;
use fedloom::model::{init_weights, ModelWeights};
use fedloom::protocol::{blob_fetch, serve_blobs, BlobService};
use fedloom::warehouse::{Address, BackendKind, Warehouse};
use fedloom::Error;

#[test]
fn file_backed_entries_survive_a_restart() {
    let dir = tempfile::tempdir().unwrap();
    let w = init_weights(5, 3, 2).unwrap();
    let (weights_id, bytes_id) = {
        let first = Warehouse::with_file_dir(dir.path()).unwrap();
        let a = first.put_weights(&w).unwrap();
        let b = first
            .put_bytes(b"opaque", &BackendKind::File(dir.path().into()))
            .unwrap();
        (a, b)
    };
    std::fs::write(dir.path().join("not-an-id"), b"ignored").unwrap();

    let second = Warehouse::with_file_dir(dir.path()).unwrap();
    assert_eq!(second.len(), 2);
    assert_eq!(second.get_weights(&weights_id).unwrap(), w);
    assert_eq!(second.get(&bytes_id).unwrap(), b"opaque");
    second.delete(&bytes_id);

    let third = Warehouse::with_file_dir(dir.path()).unwrap();
    assert!(!third.contains(&bytes_id));
    assert!(third.contains(&weights_id));
}

struct Host {
    service: Arc<BlobService>,
    clock: Arc<ManualClock>,
    _handle: fedloom::protocol::net::ListenerHandle,
}

fn host() -> Host {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let port = listener.local_addr().unwrap().port();
    let clock = Arc::new(ManualClock::new(0.0));
    let service = Arc::new(BlobService::new(
        Arc::new(Warehouse::in_memory()),
        Address::new("127.0.0.1", port).unwrap(),
        clock.clone(),
        60.0,
    ));
    let handle = serve_blobs(service.clone(), listener).unwrap();
    Host {
        service,
        clock,
        _handle: handle,
    }
}

fn rejected(r: fedloom::Result<Vec<u8>>) -> bool {
    matches!(r, Err(Error::CredentialRejected(_)))
}

#[test]
fn weights_cross_the_wire_intact() {
    let h = host();
    let w = init_weights(8, 4, 11).unwrap();
    let id = h.service.warehouse().put_weights(&w).unwrap();
    let cred = h.service.offer(&id).unwrap();
    assert!(cred.single_use);
    let got = ModelWeights::from_bytes(&blob_fetch(&cred).unwrap()).unwrap();
    assert_eq!(got, w);
    assert!(rejected(blob_fetch(&cred)));
    assert_eq!(h.service.outstanding(), 0);
}

#[test]
fn concurrent_redeems_have_one_winner() {
    let h = host();
    let id = h
        .service
        .warehouse()
        .put_bytes(&[7u8; 4096], &BackendKind::Memory)
        .unwrap();
    for _ in 0..10 {
        let cred = h.service.offer(&id).unwrap();
        let results: Vec<_> = std::thread::scope(|s| {
            let a = s.spawn(|| blob_fetch(&cred));
            let b = s.spawn(|| blob_fetch(&cred));
            vec![a.join().unwrap(), b.join().unwrap()]
        });
        assert_eq!(results.iter().filter(|r| r.is_ok()).count(), 1);
        assert_eq!(
            results
                .iter()
                .filter(|r| matches!(r, Err(Error::CredentialRejected(_))))
                .count(),
            1
        );
    }
}

#[test]
fn expired_and_gone_tokens_are_refused() {
    let h = host();
    let id = h
        .service
        .warehouse()
        .put_bytes(b"x", &BackendKind::Memory)
        .unwrap();

    let stale = h.service.offer(&id).unwrap();
    h.clock.advance(60.5);
    assert!(rejected(blob_fetch(&stale)));

    let orphan = h.service.offer(&id).unwrap();
    h.service.warehouse().delete(&id);
    assert!(rejected(blob_fetch(&orphan)));
}

#[test]
fn raw_wire_replies() {
    let h = host();
    let id = h
        .service
        .warehouse()
        .put_bytes(b"abc", &BackendKind::Memory)
        .unwrap();
    let cred = h.service.offer(&id).unwrap();
    let addr = h.service.address().socket_string();

    let mut s = TcpStream::connect(&addr).unwrap();
    s.write_all(cred.token.as_bytes()).unwrap();
    let mut reply = Vec::new();
    s.read_to_end(&mut reply).unwrap();
    let mut want = vec![0x01];
    want.extend_from_slice(&3u64.to_be_bytes());
    want.extend_from_slice(b"abc");
    assert_eq!(reply, want);

    let mut s = TcpStream::connect(&addr).unwrap();
    s.write_all(cred.token.as_bytes()).unwrap();
    let mut reply = Vec::new();
    s.read_to_end(&mut reply).unwrap();
    assert_eq!(reply, [0x00, 1]);

    // A short request is malformed once the client half-closes.
    let mut s = TcpStream::connect(&addr).unwrap();
    s.write_all(b"abc").unwrap();
    s.shutdown(std::net::Shutdown::Write).unwrap();
    let mut reply = Vec::new();
    s.read_to_end(&mut reply).unwrap();
    assert_eq!(reply, [0x00, 4]);
}
