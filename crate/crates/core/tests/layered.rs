use std::collections::{BTreeMap, BTreeSet};
use std::net::TcpListener;

use locsse::crypto::{hash_choices, ro_hash, KeyTree, Tag};
use locsse::db::Database;
use locsse::layered::*;
use locsse::scheme::Twin;
use locsse::wire::{serve_connection, Loopback, TcpTransport, Wire};
use locsse::workload::{gen_db, DbSpec, Dist};
use locsse::Error;
use proptest::prelude::*;

fn tok(i: u64) -> Tag {
    ro_hash("test-keyword", &[&i.to_le_bytes()])
}

fn db_of(lists: &[(u64, Vec<u64>)]) -> Database {
    let mut db = Database::new();
    for (k, ids) in lists {
        db.insert(tok(*k), ids.clone());
    }
    db
}

/// Splits an exported image into its bins, `t_len` and `t_full` regions.
fn regions(image: &[u8]) -> Vec<Vec<u64>> {
    let mut pos = 40;
    let mut out = Vec::new();
    for _ in 0..3 {
        let n = u64::from_le_bytes(image[pos..pos + 8].try_into().unwrap()) as usize;
        pos += 8;
        out.push(
            image[pos..pos + 8 * n]
                .chunks_exact(8)
                .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        );
        pos += 8 * n;
    }
    assert_eq!(pos, image.len());
    out
}

fn image(c: &LoopbackClient) -> Vec<Vec<u64>> {
    regions(&c.transport().service().export())
}

/// Decrypted contents of every bin, as (frag, payload, residual) triples.
fn plain_bins(c: &LoopbackClient) -> Vec<Vec<(u64, Vec<u64>, bool)>> {
    let geo = c.core().geometry();
    let stride = geo.bin_words.div_ceil(geo.p) * geo.p;
    let bins = &image(c)[0];
    (0..geo.m)
        .map(|i| {
            let bin = c.core().decrypt_bin(&bins[i * stride..i * stride + geo.bin_words]).unwrap();
            bin.balls().iter().map(|b| (b.id, b.payload.clone(), b.residual)).collect()
        })
        .collect()
}

fn distinct_bins(token: &Tag, x: u64, m: usize) -> usize {
    let (a, b) = hash_choices(&ball_tag(token, x), m);
    if a == b {
        1
    } else {
        2
    }
}

fn setup(seed: u64, params: &LayeredParams, db: &Database) -> LoopbackClient {
    LoopbackClient::setup(&KeyTree::new(seed), params, db).unwrap()
}

#[test]
fn keygen_is_deterministic() {
    assert_eq!(LseKeys::keygen(7), LseKeys::keygen(7));
    let (a, b) = (LseKeys::keygen(7), LseKeys::keygen(8));
    assert_ne!(a.k_prf, b.k_prf);
    assert_ne!(a.k_enc, b.k_enc);
    assert_ne!(a.k_enc.to_bytes(), a.k_full.to_bytes());
    assert_eq!(a.k_enc.to_bytes().len(), b.k_enc.to_bytes().len());
    assert_eq!(a.k_prf.to_bytes().len(), 36);
}

#[test]
fn empty_database_storage_layout() {
    let params = LayeredParams::new(1 << 12, 16);
    let c = setup(1, &params, &Database::new());
    let g = c.core().geometry().clone();
    let p = g.p;
    let bins = g.m * g.bin_words.div_ceil(p) * p;
    let t_len = g.len_entries.div_ceil(g.entries_per_word).div_ceil(p) * p;
    let t_full = g.full_slots * p;
    assert_eq!(c.transport().service().storage_words(), bins + t_len + t_full);
    assert_eq!(g.full_slots, (1 << 12) / 16);
    // every bin decrypts, is empty, and has the same ciphertext length
    assert!(plain_bins(&c).iter().all(|b| b.is_empty()));
    assert_eq!(g.bin_words, g.cap_ids + 4);
    let header = EdbHeader::parse(&c.transport().service().export()).unwrap();
    assert_eq!((header.n, header.p, header.m, header.cap_ids), (1 << 12, 16, g.m as u64, g.cap_ids as u64));
}

#[test]
fn geometry_matches_hand_evaluation() {
    // w_max = 2^16/16 = 4096: llog = ⌈log2 12⌉ = 4, δ = 2,
    // m = ⌈4096/8⌉ = 512, capacity = 4·2·4 = 32 pages.
    let g = LayeredParams::new(1 << 16, 16).geometry().unwrap();
    assert_eq!(g.m, 512);
    assert_eq!(g.cap_ids, 512);
    assert_eq!(g.entry_bytes, 2);
    assert_eq!(g.entries_per_word, 4);
    assert_eq!(g.max_x, 4096);
    let small = LayeredParams::new(32, 16).with_load_const(0.5625).geometry().unwrap();
    assert_eq!((small.m, small.cap_ids), (1, 18));
    assert!(LayeredParams::new(32, 16).with_load_const(0.5).geometry().is_err());
}

#[test]
fn list_of_p_plus_one_splits_into_page_and_ball() {
    let p = 16;
    let params = LayeredParams::new(1024, p);
    let list: Vec<u64> = (100..100 + p as u64 + 1).collect();
    let mut c = setup(3, &params, &db_of(&[(1, list.clone())]));
    let geo = c.core().geometry().clone();
    let bins = plain_bins(&c);
    let balls: Vec<_> = bins.iter().flatten().collect();
    assert_eq!(balls.len(), 1);
    assert_eq!(balls[0].1, vec![100 + p as u64]);
    assert!(!balls[0].2);
    assert_eq!(geo.weight(balls[0].1.len()), locsse::Exact::new(1, p as u64));
    // the ball lives under the x = 2 tag
    let frag2 = ball_tag(&tok(1), 2).prefix_u64() & ((1 << 40) - 1);
    assert_eq!(balls[0].0, frag2);
    let out = c.search(&tok(1)).unwrap();
    assert_eq!(out.ids, list);
    let bin_pages = geo.bin_words.div_ceil(p);
    assert_eq!(out.metrics.pages_touched, 1 + 1 + bin_pages * distinct_bins(&tok(1), 2, geo.m));
}

#[test]
fn random_database_round_trips() {
    let n = 1 << 14;
    let gen = gen_db(11, &DbSpec { fill: 0.9, ..DbSpec::new(n, Dist::Uniform(64)) }).unwrap();
    let mut c = setup(11, &LayeredParams::new(n, 16), &gen.db);
    for (t, ids) in gen.db.iter() {
        assert_eq!(c.search(t).unwrap().ids, ids);
    }
}

#[test]
fn search_page_counts() {
    let p = 16;
    let params = LayeredParams::new(1 << 12, p);
    let short: Vec<u64> = (1..=5).collect();
    let long: Vec<u64> = (10..10 + 3 * p as u64).collect();
    let mut c = setup(4, &params, &db_of(&[(1, short.clone()), (2, long.clone())]));
    let geo = c.core().geometry().clone();
    let bin_pages = geo.bin_words.div_ceil(p);

    let s = c.search(&tok(1)).unwrap();
    assert_eq!(s.ids, short);
    assert_eq!(s.metrics.pages_touched, bin_pages * distinct_bins(&tok(1), 1, geo.m) + 1);
    assert!(s.metrics.pages_touched <= 2 * geo.cap_ids.div_ceil(p) + 3);

    let l = c.search(&tok(2)).unwrap();
    assert_eq!(l.ids, long);
    assert_eq!(l.metrics.pages_touched, 2 + bin_pages * distinct_bins(&tok(2), 3, geo.m) + 1);
}

#[test]
fn dummy_update_only_rerandomizes() {
    let params = LayeredParams::new(1 << 10, 8);
    let mut c = setup(5, &params, &db_of(&[(1, vec![1, 2, 3])]));
    let before = (image(&c), plain_bins(&c));
    let out = c.update_add(&tok(1), &[]).unwrap();
    assert_eq!(out.outcome, Outcome::Applied);
    assert!(!out.registered_now);
    let after = (image(&c), plain_bins(&c));
    assert_eq!(before.1, after.1);
    assert_ne!(before.0[0], after.0[0]);
    assert_eq!(before.0[1], after.0[1]);
    assert_eq!(before.0[2], after.0[2]);
    assert_eq!(c.search(&tok(1)).unwrap().ids, vec![1, 2, 3]);
}

#[test]
fn small_add_grows_ball_in_place() {
    let params = LayeredParams::new(1 << 10, 8);
    let mut c = setup(6, &params, &db_of(&[(1, vec![1, 2, 3])]));
    let before = image(&c);
    assert_eq!(c.update_add(&tok(1), &[4, 5]).unwrap().outcome, Outcome::Applied);
    let after = image(&c);
    assert_eq!(before[1], after[1], "t_len unchanged");
    assert_eq!(before[2], after[2], "t_full unchanged");
    assert_eq!(c.search(&tok(1)).unwrap().ids, vec![1, 2, 3, 4, 5]);
    let live: Vec<_> = plain_bins(&c).into_iter().flatten().filter(|b| !b.2).collect();
    assert_eq!(live.len(), 1);
    assert_eq!(live[0].1, vec![1, 2, 3, 4, 5]);
}

#[test]
fn overflowing_add_splits_off_a_full_page() {
    let p = 8;
    let params = LayeredParams::new(1 << 10, p);
    let list: Vec<u64> = (1..p as u64).collect();
    let mut c = setup(7, &params, &db_of(&[(1, list.clone())]));
    let geo = c.core().geometry().clone();
    let before = image(&c);
    assert_eq!(c.update_add(&tok(1), &[100, 101]).unwrap().outcome, Outcome::Applied);
    let after = image(&c);
    assert_ne!(before[1], after[1], "t_len rewritten");
    let changed = before[2].chunks(p).zip(after[2].chunks(p)).filter(|(a, b)| a != b).count();
    assert_eq!(changed, 1, "one new full page");
    let s = c.search(&tok(1)).unwrap();
    let mut want = list.clone();
    want.extend([100, 101]);
    assert_eq!(s.ids, want);
    let bin_pages = geo.bin_words.div_ceil(p);
    assert_eq!(s.metrics.pages_touched, 1 + 1 + bin_pages * distinct_bins(&tok(1), 2, geo.m));
    let balls: Vec<_> = plain_bins(&c).into_iter().flatten().collect();
    let live: Vec<_> = balls.iter().filter(|b| !b.2).collect();
    assert_eq!(live.len(), 1);
    assert_eq!(live[0].1, vec![101]);
    assert_eq!(live[0].0, ball_tag(&tok(1), 2).prefix_u64() & ((1 << 40) - 1));
    // the superseded remainder stays behind as a zeroed residual
    let residual: Vec<_> = balls.iter().filter(|b| b.2).collect();
    assert_eq!(residual.len(), 1);
    assert_eq!(residual[0].1, vec![0; p - 1]);
}

#[test]
fn capacity_violation_rejects_and_reverts() {
    let params = LayeredParams::new(32, 16).with_load_const(0.5625);
    let list: Vec<u64> = (1..=15).collect();
    let mut c = setup(8, &params, &db_of(&[(1, list.clone())]));
    assert_eq!(c.update_add(&tok(1), &[16]).unwrap().outcome, Outcome::Applied);
    let before = (image(&c), plain_bins(&c));
    let out = c.update_add(&tok(1), &[17, 18]).unwrap();
    assert_eq!(out.outcome, Outcome::Rejected);
    let after = (image(&c), plain_bins(&c));
    assert_eq!(before.1, after.1);
    assert_eq!(before.0[1], after.0[1]);
    assert_eq!(before.0[2], after.0[2]);
    assert_eq!(c.search(&tok(1)).unwrap().ids, (1..=16).collect::<Vec<_>>());
}

#[test]
fn updates_larger_than_a_page_are_chunked() {
    let p = 4;
    let mut c = setup(9, &LayeredParams::new(1 << 8, p), &Database::new());
    let ids: Vec<u64> = (1..=11).collect();
    let out = c.update_add(&tok(3), &ids).unwrap();
    assert!(out.registered_now);
    assert_eq!(out.outcome, Outcome::Applied);
    assert_eq!(c.search(&tok(3)).unwrap().ids, ids);
    assert!(!c.update_add(&tok(3), &[12]).unwrap().registered_now);
}

#[test]
fn setup_rejects_oversized_database() {
    let db = db_of(&[(1, (0..40).collect())]);
    let err = LoopbackClient::setup(&KeyTree::new(1), &LayeredParams::new(32, 4), &db).err().unwrap();
    assert!(matches!(err, Error::DatabaseTooLarge { total: 40, n: 32 }));
}

#[test]
fn bin_ciphertexts_have_equal_length_in_every_message() {
    let p = 8;
    let gen = gen_db(2, &DbSpec { fill: 0.5, ..DbSpec::new(1 << 10, Dist::Uniform(20)) }).unwrap();
    let mut c = setup(2, &LayeredParams::new(1 << 10, p), &gen.db);
    let lens: BTreeSet<usize> = gen
        .tokens
        .iter()
        .take(10)
        .map(|t| {
            c.update_add(t, &[]).unwrap();
            let msgs = &c.transcript().messages;
            msgs[msgs.len() - 1].bytes
        })
        .collect();
    // every dummy update ships the same number of bins, so write flows
    // differ only by whether the two pairs share bins
    assert!(lens.len() <= 4, "{lens:?}");
}

#[test]
fn twin_deletes() {
    let params = LayeredParams::new(1 << 10, 8);
    let db = db_of(&[(1, vec![1, 2, 3])]);
    let mut t = Twin::setup_layered(&KeyTree::new(1), &params, &db).unwrap();
    t.delete(&tok(1), &[99]).unwrap();
    assert_eq!(t.search(&tok(1)).unwrap().ids, vec![1, 2, 3]);
    t.delete(&tok(1), &[2]).unwrap();
    assert_eq!(t.search(&tok(1)).unwrap().ids, vec![1, 3]);
    // a keyword first seen by a delete is registered on both sides
    t.delete(&tok(2), &[5]).unwrap();
    t.add(&tok(2), &[5, 6]).unwrap();
    assert_eq!(t.search(&tok(2)).unwrap().ids, vec![6]);
    let u = t.add(&tok(4), &[7]).unwrap();
    assert_eq!(u.metrics.del.len(), 1);
    assert_eq!(t.search(&tok(4)).unwrap().ids, vec![7]);
}

#[derive(Clone, Debug)]
enum TOp {
    Add(u64, u8),
    Del(u64, u8),
    Search(u64),
}

fn top() -> impl Strategy<Value = TOp> {
    prop_oneof![
        (0u64..6, 1u8..6).prop_map(|(k, n)| TOp::Add(k, n)),
        (0u64..6, 0u8..8).prop_map(|(k, i)| TOp::Del(k, i)),
        (0u64..6).prop_map(TOp::Search),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn twin_matches_plaintext_oracle(seed in any::<u64>(), ops in proptest::collection::vec(top(), 1..40)) {
        let params = LayeredParams::new(1 << 9, 4);
        let db = db_of(&[(0, vec![1000, 1001]), (1, (2000..2009).collect())]);
        let mut twin = Twin::setup_layered(&KeyTree::new(seed), &params, &db).unwrap();
        let mut oracle: BTreeMap<u64, BTreeSet<u64>> = BTreeMap::new();
        oracle.entry(0).or_default().extend([1000, 1001]);
        oracle.entry(1).or_default().extend(2000..2009);
        let mut next = 1u64;
        for op in ops {
            match op {
                TOp::Add(k, n) => {
                    let ids: Vec<u64> = (next..next + n as u64).collect();
                    next += n as u64;
                    twin.add(&tok(k), &ids).unwrap();
                    oracle.entry(k).or_default().extend(ids);
                }
                TOp::Del(k, i) => {
                    let set = oracle.entry(k).or_default();
                    let victim = set.iter().nth(i as usize).copied().unwrap_or(next + 10_000);
                    twin.delete(&tok(k), &[victim]).unwrap();
                    set.remove(&victim);
                }
                TOp::Search(k) => {
                    if let Some(set) = oracle.get(&k) {
                        let got = twin.search(&tok(k)).unwrap().ids;
                        prop_assert_eq!(got, set.iter().copied().collect::<Vec<_>>());
                    }
                }
            }
        }
        for (k, set) in &oracle {
            prop_assert_eq!(twin.search(&tok(*k)).unwrap().ids, set.iter().copied().collect::<Vec<_>>());
        }
    }
}

#[test]
fn piggyback_matches_two_rtt_state() {
    let params = LayeredParams::new(1 << 10, 8);
    let db = db_of(&[(1, vec![1, 2, 3]), (2, (10..20).collect())]);
    let mut two = setup(12, &params, &db);
    let mut one = setup(12, &params, &db);
    one.set_rtt_mode(RttMode::Piggyback).unwrap();

    let script: Vec<(u64, Vec<u64>)> = vec![(1, vec![4, 5, 6, 7, 8]), (2, vec![30]), (3, vec![40, 41])];
    for (k, ids) in &script {
        two.update_add(&tok(*k), ids).unwrap();
        one.update_add(&tok(*k), ids).unwrap();
        assert!(one.has_pending());
    }
    // back-to-back updates: each fetch carried the previous write
    let kinds: Vec<u8> = one.transcript().messages.iter().step_by(2).map(|m| m.kind).collect();
    assert_eq!(kinds, vec![2, 2, 2]);
    let s = one.search(&tok(1)).unwrap();
    assert!(!one.has_pending());
    assert_eq!(s.ids, vec![1, 2, 3, 4, 5, 6, 7, 8]);
    two.search(&tok(1)).unwrap();
    assert_eq!(image(&one), image(&two));
    assert_eq!(one.transcript().messages.len() * 2, two.transcript().messages.len() + 2);
    one.flush().unwrap();
    assert_eq!(one.transcript().messages.len(), 8, "flush with nothing pending is a no-op");
    one.finish().unwrap();
}

#[test]
fn dropping_a_pending_write_is_reported() {
    let params = LayeredParams::new(1 << 8, 4);
    let mut c = setup(13, &params, &db_of(&[(1, vec![1])]));
    c.set_rtt_mode(RttMode::Piggyback).unwrap();
    c.update_add(&tok(1), &[2]).unwrap();
    assert!(matches!(c.finish(), Err(Error::PendingLost)));

    let mut c = setup(13, &params, &db_of(&[(1, vec![1])]));
    c.set_rtt_mode(RttMode::Piggyback).unwrap();
    c.update_add(&tok(1), &[2]).unwrap();
    c.set_rtt_mode(RttMode::TwoRtt).unwrap();
    assert!(!c.has_pending());
    assert_eq!(c.search(&tok(1)).unwrap().ids, vec![1, 2]);
    c.finish().unwrap();
}

#[test]
fn request_codec_roundtrip() {
    let flow = WriteFlow {
        token: tok(1),
        entry: vec![1, 2],
        bins: vec![(3, vec![4, 5, 6])],
        full_page: Some((2, vec![7; 4])),
    };
    let reqs = [
        LseRequest::Search { pending: Some(flow.clone()), query: SearchQuery { token: tok(2), mask: vec![9, 9] } },
        LseRequest::Fetch { pending: None, query: SearchQuery { token: tok(3), mask: vec![1] } },
        LseRequest::Write(WriteFlow { full_page: None, ..flow }),
    ];
    for r in reqs {
        assert_eq!(LseRequest::decode(&r.encode()).unwrap(), r);
    }
    let resps = [
        LseResponse::Search(SearchReply { x: 3, full_pages: vec![vec![1, 2], vec![3, 4]], bins: vec![(0, vec![5])] }),
        LseResponse::Fetch(FetchReply { x: 1, registered_now: true, bins: vec![] }),
        LseResponse::Ack,
    ];
    for r in resps {
        let bytes = r.encode();
        assert_eq!(LseResponse::decode(&bytes).unwrap(), r);
        assert!(LseResponse::decode(&bytes[..bytes.len() - 1]).is_err());
    }
}

#[test]
fn tcp_and_loopback_agree() {
    let params = LayeredParams::new(1 << 10, 8);
    let db = db_of(&[(1, vec![1, 2, 3]), (2, (10..30).collect())]);
    let tree = KeyTree::new(21);
    let geo = params.geometry().unwrap();

    let mut core = LayeredCore::new(LseKeys::from_tree(&tree), geo.clone(), tree.rng("layered/client"));
    let img = core.build_image(db.iter()).unwrap();
    let mut service = LayeredService::create(geo, img, &mut tree.rng("layered/server")).unwrap();
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let server = std::thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        serve_connection(stream, &mut service).unwrap();
        service.export()
    });
    let mut tcp = LayeredClient::new(core, TcpTransport::connect(&addr).unwrap());
    let mut local = LoopbackClient::setup(&tree, &params, &db).unwrap();

    for c in 0..2 {
        let a = tcp.update_add(&tok(c + 1), &[100 + c]).unwrap();
        let b = local.update_add(&tok(c + 1), &[100 + c]).unwrap();
        assert_eq!(a.metrics, b.metrics);
        let a = tcp.search(&tok(c + 1)).unwrap();
        let b = local.search(&tok(c + 1)).unwrap();
        assert_eq!(a.ids, b.ids);
        assert_eq!(a.metrics, b.metrics);
    }
    assert_eq!(tcp.transcript(), local.transcript());
    drop(tcp);
    let exported = server.join().unwrap();
    assert_eq!(exported, local.transport().service().export());
    let _: &Loopback<LayeredService> = local.transport();
}
