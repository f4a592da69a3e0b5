use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use edgebench_core::broker::{scan_log_file, BrokerClient, BrokerError, BrokerServer};
use edgebench_core::net::NetCounters;
use edgebench_core::wire::{build_payload, parse_payload, MsgId};
use edgebench_core::{Broker, BrokerConfig};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};

const TOPICS: [&str; 3] = ["bench", "u000001", "other"];

pub fn envelope(user: u32, seq: u32) -> Vec<u8> {
    build_payload(MsgId::derive(9, user, seq), user, seq, 1, 200).unwrap().payload
}

pub fn open(dir: &Path, flush_every: u32) -> Broker {
    Broker::open(BrokerConfig {
        data_dir: dir.to_path_buf(),
        flush_every,
        ..Default::default()
    })
    .unwrap()
}

#[derive(Debug, Clone)]
pub enum Op {
    Produce { topic: usize, user: u32 },
    Fetch { topic: usize, from_back: u64, max: u32 },
    Commit { topic: usize, back: u64 },
    Restart,
}

pub fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        6 => (0..TOPICS.len(), 0u32..4).prop_map(|(topic, user)| Op::Produce { topic, user }),
        4 => (0..TOPICS.len(), 0u64..12, 1u32..8).prop_map(|(topic, from_back, max)| Op::Fetch { topic, from_back, max }),
        2 => (0..TOPICS.len(), 0u64..6).prop_map(|(topic, back)| Op::Commit { topic, back }),
        1 => Just(Op::Restart),
    ]
}

/// Replays `ops` against a broker and a reference model of per-topic logs.
pub fn check_sequence(ops: &[Op]) -> Result<(), TestCaseError> {
    let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut broker = open(dir.path(), 1);
    let mut model: HashMap<&str, Vec<Vec<u8>>> = HashMap::new();
    let mut committed: HashMap<&str, u64> = HashMap::new();
    let mut seqs: HashMap<u32, u32> = HashMap::new();

    for op in ops {
        match *op {
            Op::Produce { topic, user } => {
                let t = TOPICS[topic];
                let seq = seqs.entry(user).or_default();
                let env = envelope(user, *seq);
                *seq += 1;
                let off = broker.produce(t, &env).unwrap();
                let log = model.entry(t).or_default();
                prop_assert_eq!(off, log.len() as u64, "offset must equal the log length");
                log.push(env);
            }
            Op::Fetch { topic, from_back, max } => {
                let t = TOPICS[topic];
                let log = model.get(t).map_or(&[][..], |v| &v[..]);
                let len = log.len() as u64;
                // from_back counts back from one past the end, so 0 is out of range
                let from = (len + 1).saturating_sub(from_back);
                let res = rt.block_on(broker.fetch(t, from, max, Duration::ZERO));
                if from > len {
                    prop_assert!(matches!(res, Err(BrokerError::OutOfRange { .. })), "expected out of range");
                    continue;
                }
                let res = res.unwrap();
                let end = len.min(from + max as u64);
                prop_assert_eq!(res.records.len() as u64, end - from);
                prop_assert_eq!(res.next_offset, len);
                for (i, r) in res.records.iter().enumerate() {
                    prop_assert_eq!(r.offset, from + i as u64, "gap or reorder");
                    prop_assert_eq!(&r.envelope[..], &log[(from as usize) + i][..]);
                }
            }
            Op::Commit { topic, back } => {
                let t = TOPICS[topic];
                let len = model.get(t).map_or(0, |v| v.len()) as u64;
                let off = len.saturating_sub(back);
                let stored = broker.commit_offset("g", t, off).unwrap();
                let c = committed.entry(t).or_default();
                *c = (*c).max(off);
                prop_assert_eq!(stored, *c, "commit must be monotone");
            }
            Op::Restart => {
                drop(broker);
                broker = open(dir.path(), 1);
            }
        }
    }

    // durability: a fresh instance and a raw scan both see the model
    drop(broker);
    let broker = open(dir.path(), 1);
    for t in TOPICS {
        let log = model.get(t).map_or(&[][..], |v| &v[..]);
        prop_assert_eq!(broker.next_offset(t), log.len() as u64);
        prop_assert_eq!(broker.committed("g", t), committed.get(t).copied().unwrap_or(0));
        let scanned = scan_log_file(dir.path(), t).unwrap();
        prop_assert_eq!(scanned.len(), log.len());
        for (i, r) in scanned.iter().enumerate() {
            prop_assert_eq!(r.offset, i as u64);
            prop_assert_eq!(&r.envelope[..], &log[i][..]);
        }
    }
    Ok(())
}

/// Runs `cases` random operation sequences; returns the first failure.
pub fn interleavings(cases: u32) -> Result<(), String> {
    let mut runner = TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    });
    runner
        .run(&prop::collection::vec(op(), 1..60), |ops| check_sequence(&ops))
        .map_err(|e| e.to_string())
}

/// Concurrent producers over TCP with a concurrent reader: offsets are
/// contiguous and each producer's records keep their order.
pub async fn concurrent_producers() {
    let dir = tempfile::tempdir().unwrap();
    let broker = Arc::new(open(dir.path(), 1));
    let net = NetCounters::new();
    let server = BrokerServer::bind(broker.clone(), "127.0.0.1:0".parse().unwrap(), net.clone())
        .await
        .unwrap();
    let addr = server.local_addr();
    const PRODUCERS: u32 = 8;
    const PER: u32 = 200;

    let reader = {
        let net = net.clone();
        tokio::spawn(async move {
            let mut c = BrokerClient::connect(addr, net).await.unwrap();
            let mut seen = Vec::new();
            let mut from = 0;
            while seen.len() < (PRODUCERS * PER) as usize {
                let r = c.fetch("bench", from, 64, Duration::from_millis(200)).await.unwrap();
                for rec in r.records {
                    assert_eq!(rec.offset, from);
                    from += 1;
                    seen.push(parse_payload(&rec.envelope).unwrap());
                }
            }
            seen
        })
    };
    let mut producers = Vec::new();
    for user in 0..PRODUCERS {
        let net = net.clone();
        producers.push(tokio::spawn(async move {
            let mut c = BrokerClient::connect(addr, net).await.unwrap();
            let mut offs = Vec::new();
            for seq in 0..PER {
                offs.push(c.produce("bench", &envelope(user, seq)).await.unwrap());
            }
            offs
        }));
    }
    let mut all_offsets = Vec::new();
    for p in producers {
        let offs = p.await.unwrap();
        assert!(offs.windows(2).all(|w| w[0] < w[1]), "acks out of order for one producer");
        all_offsets.extend(offs);
    }
    all_offsets.sort_unstable();
    assert_eq!(all_offsets, (0..(PRODUCERS * PER) as u64).collect::<Vec<_>>());

    let seen = reader.await.unwrap();
    let mut next_seq = vec![0u32; PRODUCERS as usize];
    for h in seen {
        assert_eq!(h.seq, next_seq[h.user_id as usize], "per-producer reorder");
        next_seq[h.user_id as usize] += 1;
    }
    assert!(next_seq.iter().all(|&n| n == PER));
    server.shutdown();
}
