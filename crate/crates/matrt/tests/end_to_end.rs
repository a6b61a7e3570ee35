//! Controller-to-target integration over loopback TCP.

use std::sync::mpsc;
use std::time::{Duration, Instant};

use matrt::bench;
use matrt::client::{ClientError, ConnectOptions, Session};
use matrt::target::{serve, TargetConfig, TargetHandle};
use matrt_core::schema::{parse_schema, ProgramSchema};
use matrt_core::wire::{StatusCode, TableUpdate, WriteBatch};

const FIREWALL_DOC: &str = include_str!("../../../schemas/firewall.json");
const ROUTER_DOC: &str = include_str!("../../../schemas/router.json");

fn firewall_schema() -> ProgramSchema {
    parse_schema(FIREWALL_DOC).unwrap()
}

fn spawn_firewall() -> TargetHandle {
    serve(firewall_schema(), "127.0.0.1:0", TargetConfig::default()).unwrap()
}

fn permit(session: &Session, src: u32, dst: u32) -> TableUpdate {
    session
        .entry("firewall_entries")
        .unwrap()
        .key("src_ip", src)
        .key("dst_ip", dst)
        .action("permit")
        .insert()
        .unwrap()
}

#[test]
fn connect_negotiates_schema() {
    let target = spawn_firewall();
    let session = Session::connect(&target.endpoint(), Some("firewall")).unwrap();
    assert_eq!(session.program(), "firewall");
    assert_eq!(session.schema().tables.len(), 1);
    assert_eq!(session.schema().schema_digest, firewall_schema().schema_digest);
}

#[test]
fn connect_rejects_wrong_program() {
    let target = spawn_firewall();
    let err = match Session::connect(&target.endpoint(), Some("other")) {
        Ok(_) => panic!("expected a schema mismatch"),
        Err(e) => e,
    };
    assert!(matches!(err, ClientError::SchemaMismatch(_)), "{err}");
}

#[test]
fn single_insert_round_trip() {
    let target = spawn_firewall();
    let session = Session::connect(&target.endpoint(), None).unwrap();
    let timed = session
        .write(WriteBatch { atomic: false, updates: vec![permit(&session, 1, 2)] })
        .unwrap();
    assert!(timed.report.all_ok());
    assert!(timed.elapsed() > Duration::ZERO);
    assert_eq!(target.occupancy(1), Some(1));
}

#[test]
fn insert_all_partitions_into_ceiling_batches() {
    let target = spawn_firewall();
    let session = Session::connect(&target.endpoint(), None).unwrap();
    let updates: Vec<TableUpdate> = (0..10).map(|i| permit(&session, i, i + 100)).collect();

    let reports = session.insert_all(&updates, 3).unwrap();
    assert_eq!(reports.len(), 4, "10 updates in batches of 3 : 3+3+3+1");
    assert_eq!(
        reports.iter().map(|r| r.report.per_op.len()).collect::<Vec<_>>(),
        vec![3, 3, 3, 1]
    );

    // One batch covering everything yields a single report.
    bench::clear_table(&session, "firewall_entries").unwrap();
    let reports = session.insert_all(&updates, updates.len()).unwrap();
    assert_eq!(reports.len(), 1);
    assert_eq!(target.occupancy(1), Some(10));
}

#[test]
fn final_state_is_independent_of_batch_size() {
    let target = spawn_firewall();
    let session = Session::connect(&target.endpoint(), None).unwrap();
    let updates: Vec<TableUpdate> = (0..257).map(|i| permit(&session, i, 7 * i + 1)).collect();

    let mut dumps = Vec::new();
    for batch_size in [1usize, 7, 64, 257] {
        bench::clear_table(&session, "firewall_entries").unwrap();
        session.insert_all(&updates, batch_size).unwrap();
        let mut dump = session.read("firewall_entries", None).unwrap();
        // Insertion order equals workload order regardless of batching.
        assert_eq!(dump.len(), updates.len());
        assert_eq!(
            dump.iter().map(|e| e.key.clone()).collect::<Vec<_>>(),
            updates.iter().map(|e| e.key.clone()).collect::<Vec<_>>()
        );
        dump.sort_by(|a, b| a.key.cmp(&b.key));
        dumps.push(dump);
    }
    assert!(dumps.windows(2).all(|w| w[0] == w[1]));
    drop(target);
}

#[test]
fn sum_of_elapsed_never_exceeds_wall_clock() {
    let target = spawn_firewall();
    let session = Session::connect(&target.endpoint(), None).unwrap();
    let updates: Vec<TableUpdate> = (0..200).map(|i| permit(&session, i, i)).collect();
    let started = Instant::now();
    let reports = session.insert_all(&updates, 10).unwrap();
    let wall = started.elapsed();
    let total: Duration = reports.iter().map(|r| r.elapsed()).sum();
    assert!(total <= wall, "sum of elapsed {total:?} exceeds wall clock {wall:?}");
    drop(target);
}

#[test]
fn read_paths() {
    let target = spawn_firewall();
    let session = Session::connect(&target.endpoint(), None).unwrap();
    assert_eq!(session.read("firewall_entries", None).unwrap(), vec![]);

    let update = permit(&session, 0x0A00_0001, 0x0A00_0002);
    session.write(WriteBatch { atomic: false, updates: vec![update.clone()] }).unwrap();

    let by_key = session.read("firewall_entries", Some(&update.key)).unwrap();
    assert_eq!(by_key, vec![update]);

    let err = match session.read("not_a_table", None) {
        Ok(_) => panic!("expected schema mismatch"),
        Err(e) => e,
    };
    assert!(matches!(err, ClientError::SchemaMismatch(_)), "{err}");
    drop(target);
}

#[test]
fn write_after_shutdown_is_a_transport_error() {
    let target = spawn_firewall();
    let session = Session::connect(&target.endpoint(), None).unwrap();
    let update = permit(&session, 1, 2);
    target.shutdown();
    // The first write after shutdown may observe the close on send or on
    // receive; both surface as transport errors.
    let err = match session.write(WriteBatch { atomic: false, updates: vec![update] }) {
        Ok(_) => panic!("write succeeded after target shutdown"),
        Err(e) => e,
    };
    assert!(matches!(err, ClientError::Transport(_)), "{err}");
}

#[test]
fn concurrent_disjoint_writers_linearize() {
    let target = spawn_firewall();
    let endpoint = target.endpoint();
    let threads: Vec<_> = (0..2)
        .map(|t| {
            let endpoint = endpoint.clone();
            std::thread::spawn(move || {
                let session = Session::connect(&endpoint, None).unwrap();
                let updates: Vec<TableUpdate> = (0..500u32)
                    .map(|i| permit(&session, t * 1_000_000 + i, i))
                    .collect();
                for chunk in updates.chunks(50) {
                    let timed = session
                        .write(WriteBatch { atomic: false, updates: chunk.to_vec() })
                        .unwrap();
                    assert!(timed.report.all_ok());
                }
            })
        })
        .collect();
    for t in threads {
        t.join().unwrap();
    }
    assert_eq!(target.occupancy(1), Some(1000));
}

#[test]
fn concurrent_same_key_writers_leave_one_winner() {
    let target = spawn_firewall();
    let endpoint = target.endpoint();
    let threads: Vec<_> = ["permit", "deny"]
        .into_iter()
        .map(|action| {
            let endpoint = endpoint.clone();
            std::thread::spawn(move || {
                let session = Session::connect(&endpoint, None).unwrap();
                let update = session
                    .entry("firewall_entries")
                    .unwrap()
                    .key("src_ip", 9u32)
                    .key("dst_ip", 9u32)
                    .action(action)
                    .insert()
                    .unwrap();
                let timed =
                    session.write(WriteBatch { atomic: false, updates: vec![update] }).unwrap();
                (action, timed.report.per_op[0].status)
            })
        })
        .collect();
    let outcomes: Vec<(&str, StatusCode)> =
        threads.into_iter().map(|t| t.join().unwrap()).collect();
    let winners: Vec<&str> =
        outcomes.iter().filter(|(_, s)| s.is_ok()).map(|(a, _)| *a).collect();
    let losers = outcomes.iter().filter(|(_, s)| *s == StatusCode::AlreadyExists).count();
    assert_eq!(winners.len(), 1, "exactly one insert wins: {outcomes:?}");
    assert_eq!(losers, 1);

    // The stored action is the winner's.
    let session = Session::connect(&endpoint, None).unwrap();
    let entries = session.read("firewall_entries", None).unwrap();
    assert_eq!(entries.len(), 1);
    let stored = entries[0].action.as_ref().unwrap().action_id;
    let winner_id = session
        .table("firewall_entries")
        .unwrap()
        .action_by_name(winners[0])
        .unwrap()
        .action_id;
    assert_eq!(stored, winner_id);
}

#[test]
fn garbage_session_closes_without_harming_others() {
    let target = spawn_firewall();
    let session = Session::connect(&target.endpoint(), None).unwrap();

    // A rogue peer sends garbage and gets disconnected.
    {
        use std::io::{Read, Write};
        let mut rogue = std::net::TcpStream::connect(target.endpoint()).unwrap();
        rogue.write_all(b"this is not a frame at all").unwrap();
        let mut buf = [0u8; 16];
        let n = rogue.read(&mut buf).unwrap_or(0);
        assert_eq!(n, 0, "rogue session must be closed, not answered");
    }

    // The healthy session keeps working.
    let timed = session
        .write(WriteBatch { atomic: false, updates: vec![permit(&session, 5, 6)] })
        .unwrap();
    assert!(timed.report.all_ok());
}

#[test]
fn target_response_delay_bounds_every_request() {
    let schema = firewall_schema();
    let target = serve(
        schema,
        "127.0.0.1:0",
        TargetConfig { response_delay: Duration::from_millis(2) },
    )
    .unwrap();
    let session = Session::connect(&target.endpoint(), None).unwrap();
    for i in 0..5 {
        let started = Instant::now();
        let timed = session
            .write(WriteBatch { atomic: false, updates: vec![permit(&session, i, i)] })
            .unwrap();
        assert!(timed.elapsed() >= Duration::from_millis(2), "request {i}");
        assert!(started.elapsed() >= Duration::from_millis(2), "request {i}");
    }
    // Reads are delayed too.
    let started = Instant::now();
    session.read("firewall_entries", None).unwrap();
    assert!(started.elapsed() >= Duration::from_millis(2));
}

#[test]
fn injected_latency_is_part_of_measured_time() {
    let target = spawn_firewall();
    let session = Session::connect_with(
        &target.endpoint(),
        ConnectOptions {
            injected_latency: Duration::from_millis(3),
            ..ConnectOptions::default()
        },
    )
    .unwrap();
    let timed = session
        .write(WriteBatch { atomic: false, updates: vec![permit(&session, 1, 1)] })
        .unwrap();
    assert!(timed.elapsed() >= Duration::from_millis(3));
}

#[test]
fn notifications_arrive_in_order_and_only_on_miss() {
    let target = spawn_firewall();
    let listener = Session::connect(&target.endpoint(), None).unwrap();
    let prober = Session::connect(&target.endpoint(), None).unwrap();

    let (tx, rx) = mpsc::channel();
    let _sub = listener.subscribe(move |event| tx.send(event).unwrap()).unwrap();

    // A hit produces no notification.
    prober
        .write(WriteBatch { atomic: false, updates: vec![permit(&prober, 42, 42)] })
        .unwrap();
    prober.test_packet("firewall_entries", [("src_ip", 42u32), ("dst_ip", 42u32)]).unwrap();

    // Three misses notify in order.
    for i in 0..3u32 {
        prober
            .test_packet("firewall_entries", [("src_ip", 100 + i), ("dst_ip", 200 + i)])
            .unwrap();
    }
    for i in 0..3u32 {
        let event = rx.recv_timeout(Duration::from_secs(2)).unwrap();
        assert_eq!(event.table_id, 1);
        let src = u32::from_be_bytes(event.fields[0].value.clone().try_into().unwrap());
        assert_eq!(src, 100 + i, "events arrive in probe order");
    }
    // Nothing else arrives (in particular, nothing for the hit).
    assert!(rx.recv_timeout(Duration::from_millis(100)).is_err());
}

#[test]
fn miss_with_no_subscriber_is_harmless() {
    let target = spawn_firewall();
    let session = Session::connect(&target.endpoint(), None).unwrap();
    session.test_packet("firewall_entries", [("src_ip", 1u32), ("dst_ip", 2u32)]).unwrap();
    // The session stays healthy afterward.
    let timed = session
        .write(WriteBatch { atomic: false, updates: vec![permit(&session, 1, 2)] })
        .unwrap();
    assert!(timed.report.all_ok());
    drop(target);
}

#[test]
fn register_and_port_tables_configure_through_the_same_path() {
    let schema = parse_schema(ROUTER_DOC).unwrap();
    let target = serve(schema, "127.0.0.1:0", TargetConfig::default()).unwrap();
    let session = Session::connect(&target.endpoint(), Some("router")).unwrap();

    let cell = session
        .entry("flow_counters")
        .unwrap()
        .key("index", 17u16)
        .action("write")
        .param("value", 0xDEAD_BEEFu64)
        .insert()
        .unwrap();
    let port = session
        .entry("ports")
        .unwrap()
        .key("port", 130u16)
        .action("configure")
        .param("speed_gbps", 100u16)
        .param("enabled", 1u8)
        .insert()
        .unwrap();
    let timed =
        session.write(WriteBatch { atomic: false, updates: vec![cell, port] }).unwrap();
    assert!(timed.report.all_ok());

    let cells = session.read("flow_counters", None).unwrap();
    assert_eq!(cells.len(), 1);
    assert_eq!(
        cells[0].action.as_ref().unwrap().params[0].value,
        0xDEAD_BEEFu64.to_be_bytes()[..8].to_vec()
    );
    let ports = session.read("ports", None).unwrap();
    assert_eq!(ports.len(), 1);
    assert_eq!(ports[0].action.as_ref().unwrap().params[0].value, vec![0, 100]);
}

#[test]
fn lpm_and_ternary_tables_work_end_to_end() {
    let schema = parse_schema(ROUTER_DOC).unwrap();
    let target = serve(schema, "127.0.0.1:0", TargetConfig::default()).unwrap();
    let session = Session::connect(&target.endpoint(), None).unwrap();

    let coarse = session
        .entry("routes")
        .unwrap()
        .key_lpm("dst", "10.0.0.0", 8)
        .action("forward")
        .param("port", 1u16)
        .insert()
        .unwrap();
    let fine = session
        .entry("routes")
        .unwrap()
        .key_lpm("dst", "10.1.0.0", 16)
        .action("forward")
        .param("port", 2u16)
        .insert()
        .unwrap();
    session.write(WriteBatch { atomic: false, updates: vec![coarse, fine] }).unwrap();

    let (tx, rx) = mpsc::channel();
    let _sub = session.subscribe(move |e| tx.send(e).unwrap()).unwrap();

    // 10.1.2.3 hits the /16 route: no notification.
    session.test_packet("routes", [("dst", "10.1.2.3")]).unwrap();
    // 11.0.0.1 misses: notification.
    session.test_packet("routes", [("dst", "11.0.0.1")]).unwrap();
    let event = rx.recv_timeout(Duration::from_secs(2)).unwrap();
    assert_eq!(event.fields[0].value, vec![11, 0, 0, 1]);

    let acl = session
        .entry("acl")
        .unwrap()
        .key_ternary("src", "10.0.0.0", "255.0.0.0")
        .key("proto", 6u8)
        .priority(10)
        .action("deny")
        .insert()
        .unwrap();
    let timed = session.write(WriteBatch { atomic: false, updates: vec![acl] }).unwrap();
    assert!(timed.report.all_ok());
    session.test_packet("acl", [("src", "10.200.0.1"), ("proto", "6")]).unwrap();
    assert!(
        rx.recv_timeout(Duration::from_millis(200)).is_err(),
        "covered packet must not notify"
    );
}

// Wire-level checks against a hand-driven fake target: the frames a
// session emits are inspected directly.
mod wire_surface {
    use super::*;
    use matrt::frame::{read_frame, write_frame};
    use matrt_core::schema::serialize_schema;
    use matrt_core::wire::{encode, Body, Message};
    use std::net::TcpListener;

    fn handshake(
        stream: &mut std::net::TcpStream,
        reader: &mut std::io::BufReader<std::net::TcpStream>,
        schema: &ProgramSchema,
    ) {
        let hello = read_frame(reader).unwrap();
        assert!(matches!(hello.body, Body::Hello { .. }));
        assert_eq!(hello.request_id, 1, "request ids start at 1");
        let ack = Message {
            request_id: hello.request_id,
            body: Body::HelloAck {
                schema_digest: schema.schema_digest,
                program: schema.program_name.clone(),
            },
        };
        write_frame(stream, &encode(&ack).unwrap()).unwrap();

        let get = read_frame(reader).unwrap();
        assert!(matches!(get.body, Body::GetSchema));
        assert_eq!(get.request_id, 2);
        let doc = Message {
            request_id: get.request_id,
            body: Body::SchemaDoc { document: serialize_schema(schema) },
        };
        write_frame(stream, &encode(&doc).unwrap()).unwrap();
    }

    #[test]
    fn request_ids_strictly_increase_on_the_wire() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let endpoint = listener.local_addr().unwrap().to_string();

        let fake = std::thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            let mut writer = stream.try_clone().unwrap();
            let mut reader = std::io::BufReader::new(stream);
            let schema = firewall_schema();
            handshake(&mut writer, &mut reader, &schema);

            let mut last_id = 2;
            for _ in 0..3 {
                let req = read_frame(&mut reader).unwrap();
                assert!(req.request_id > last_id, "ids must strictly increase");
                last_id = req.request_id;
                let Body::Write(batch) = req.body else { panic!("expected a write") };
                let statuses =
                    batch.updates.iter().map(|_| matrt_core::wire::OpStatus::ok()).collect();
                let ack = Message {
                    request_id: req.request_id,
                    body: Body::WriteAck(matrt_core::wire::WriteReport::from_statuses(
                        batch.atomic,
                        statuses,
                    )),
                };
                write_frame(&mut writer, &encode(&ack).unwrap()).unwrap();
            }
        });

        let session = Session::connect(&endpoint, None).unwrap();
        for i in 0..3 {
            let update = permit(&session, i, i);
            let timed =
                session.write(WriteBatch { atomic: false, updates: vec![update] }).unwrap();
            assert!(timed.report.all_ok());
        }
        fake.join().unwrap();
    }

    #[test]
    fn undecodable_ack_is_reported_as_remote_malformed() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let endpoint = listener.local_addr().unwrap().to_string();

        let fake = std::thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            let mut writer = stream.try_clone().unwrap();
            let mut reader = std::io::BufReader::new(stream);
            let schema = firewall_schema();
            handshake(&mut writer, &mut reader, &schema);

            let _req = read_frame(&mut reader).unwrap();
            use std::io::Write;
            writer.write_all(&[0xDE, 0xAD, 0xBE, 0xEF, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10]).unwrap();
        });

        let session = Session::connect(&endpoint, None).unwrap();
        let update = permit(&session, 1, 2);
        let err = match session.write(WriteBatch { atomic: false, updates: vec![update] }) {
            Ok(_) => panic!("expected an error"),
            Err(e) => e,
        };
        assert!(matches!(err, ClientError::RemoteMalformed(_)), "{err}");
        fake.join().unwrap();
    }
}
