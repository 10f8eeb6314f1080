import struct
import threading
import time
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from robokeys.controller import PriorUpdate
from robokeys.transport import (
    HEADER_SIZE,
    MAGIC,
    SAMPLE,
    STATS,
    BadMagicError,
    CallableStream,
    EndOfData,
    EndOfStream,
    Hello,
    Interleaver,
    LengthMismatchError,
    ProtocolError,
    Publisher,
    SampleMessage,
    SessionError,
    Stats,
    Stream,
    Subscriber,
    SubscriberDemux,
    TruncatedError,
    UnknownMessageTypeError,
    UnsupportedVersionError,
    decode,
    encode,
    interleave_batches,
    parse_endpoint,
)

_names = iter(range(10**9))


def endpoint(kind):
    if kind == "inproc":
        return f"inproc://test-{next(_names)}"
    return "tcp://127.0.0.1:0"


def random_sample(rng, sim_id=0, sample_id=0):
    J = int(rng.integers(1, 8))
    K = int(rng.integers(1, 17))
    h, w = (int(v) for v in rng.integers(1, 9, 2))
    return SampleMessage(
        sim_id=sim_id,
        sample_id=sample_id,
        bin_count=K,
        image=rng.random((3, h, w)).astype(np.float32),
        beliefs=rng.random((J, h, w)).astype(np.float32),
        angles=rng.uniform(0, 2 * np.pi, J),
        bins=rng.integers(0, K, J).astype(np.uint16),
        camera=tuple(rng.normal(size=3)),
        augmentation_seed=int(rng.integers(0, 2**63)),
    )


def random_message(rng, i):
    kind = i % 4
    if kind == 0:
        return Hello(int(rng.integers(0, 2**16)), int(rng.integers(0, 3)), int(rng.integers(0, 2**63)))
    if kind == 1:
        return Stats(int(rng.integers(0, 2**16)), int(rng.integers(0, 3)), *(int(v) for v in rng.integers(0, 2**62, 3)))
    if kind == 2:
        return PriorUpdate(int(rng.integers(0, 2**16)), int(rng.integers(0, 256)), rng.uniform(1e-3, 1e3, int(rng.integers(1, 20))))
    return random_sample(rng, int(rng.integers(0, 2**16)), int(rng.integers(0, 2**63)))


class TestCodec:
    def test_fuzz_roundtrip(self):
        rng = np.random.default_rng(0)
        for i in range(2000):
            m = random_message(rng, i)
            assert decode(encode(m)) == m

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(min_value=1e-300, max_value=1e300), min_size=1, max_size=32))
    def test_prior_update_bit_exact(self, theta):
        m = PriorUpdate(3, 1, np.array(theta))
        back = decode(encode(m))
        assert back.theta.tobytes() == m.theta.tobytes()

    def test_header_layout(self):
        frame = encode(Hello(7, 0, 9))
        magic, version, kind, length = struct.unpack_from("<IHHQ", frame)
        assert (magic, version, kind, length) == (MAGIC, 1, 1, len(frame) - HEADER_SIZE)
        assert frame[:4] == struct.pack("<I", 0x524B5031)

    def test_encode_is_pure(self):
        m = random_sample(np.random.default_rng(1))
        assert encode(m) == encode(m)

    def test_bad_magic(self):
        frame = bytearray(encode(Hello(1)))
        frame[0] ^= 1
        with pytest.raises(BadMagicError) as err:
            decode(frame)
        assert err.value.offset == 0

    def test_bad_version(self):
        frame = bytearray(encode(Hello(1)))
        frame[4] = 9
        with pytest.raises(UnsupportedVersionError) as err:
            decode(frame)
        assert err.value.offset == 4

    def test_unknown_type(self):
        frame = bytearray(encode(Hello(1)))
        frame[6] = 77
        with pytest.raises(UnknownMessageTypeError):
            decode(frame)

    def test_truncated(self):
        frame = encode(random_sample(np.random.default_rng(2)))
        with pytest.raises(TruncatedError) as err:
            decode(frame[:-3])
        assert err.value.offset == len(frame) - 3
        with pytest.raises(TruncatedError):
            decode(frame[:5])

    def test_declared_length_too_large(self):
        frame = bytearray(encode(Hello(1)))
        struct.pack_into("<Q", frame, 8, 1000)
        with pytest.raises(TruncatedError):
            decode(frame)

    def test_length_mismatch(self):
        frame = bytearray(encode(Hello(1)) + b"\0\0")
        struct.pack_into("<Q", frame, 8, len(frame) - HEADER_SIZE)
        with pytest.raises(LengthMismatchError):
            decode(frame)

    def test_trailing_bytes(self):
        with pytest.raises(LengthMismatchError):
            decode(encode(Hello(1)) + b"x")

    def test_errors_are_distinct(self):
        kinds = {BadMagicError, UnsupportedVersionError, UnknownMessageTypeError, LengthMismatchError, TruncatedError}
        assert len(kinds) == 5
        assert all(issubclass(k, ProtocolError) for k in kinds)

    def test_rejects_bad_values(self):
        with pytest.raises(ValueError):
            encode(PriorUpdate(0, 0, np.array([1.0, 0.0])))
        m = random_sample(np.random.default_rng(3))
        m.bins[0] = m.bin_count
        with pytest.raises(ValueError):
            encode(m)

    def test_sample_scene_roundtrip(self):
        from robokeys.scenegen import CameraRanges, make_rng, sample_scene, uniform_states

        s = sample_scene(uniform_states(6), CameraRanges(), make_rng(4), 12, 1)
        m = SampleMessage.from_scene(s, np.zeros((3, 4, 4)), np.zeros((6, 4, 4)))
        back = decode(encode(m)).scene()
        assert back.angles.tobytes() == s.angles.tobytes()
        assert back.bins.tolist() == s.bins.tolist()
        assert back.augmentation_seed == s.augmentation_seed
        assert (back.sample_id, back.sim_id) == (12, 1)

    @pytest.mark.parametrize("text", ["udp://x:1", "tcp://host", "inproc://", "tcp://h:port"])
    def test_bad_endpoint(self, text):
        with pytest.raises(ValueError):
            parse_endpoint(text)


@pytest.fixture(params=["inproc", "tcp"])
def kind(request):
    return request.param


def drain(sub, n, timeout=5.0):
    return [sub.next(timeout=timeout) for _ in range(n)]


class TestPubSub:
    def test_order(self, kind):
        with Subscriber(endpoint(kind), types=[SAMPLE]) as sub:
            rng = np.random.default_rng(0)
            sent = [random_sample(rng, 1, i) for i in range(100)]
            pub = Publisher(sub.endpoint, Hello(1))

            def run():
                for m in sent:
                    pub.publish(m)

            t = threading.Thread(target=run)
            t.start()
            got = drain(sub, 100)
            t.join()
            pub.close()
            assert got == sent

    def test_type_filter(self, kind):
        with Subscriber(endpoint(kind), types=[STATS]) as sub:
            pub = Publisher(sub.endpoint, Hello(1))
            rng = np.random.default_rng(1)
            for i in range(100):
                pub.publish(random_sample(rng, 1, i))
            pub.publish(Stats(1, published=100))
            assert sub.next(timeout=5) == Stats(1, published=100)
            pub.close()
            with pytest.raises(TimeoutError):
                sub.next(timeout=0.2)

    def test_two_publishers(self, kind):
        with Subscriber(endpoint(kind), types=[SAMPLE], queue_size=8) as sub:
            rng = np.random.default_rng(2)
            streams = {s: [random_sample(rng, s, i) for i in range(100)] for s in (1, 2)}
            pubs = [Publisher(sub.endpoint, Hello(s)) for s in (1, 2)]

            def run(pub, msgs):
                for m in msgs:
                    pub.publish(m)

            threads = [threading.Thread(target=run, args=(p, streams[s])) for p, s in zip(pubs, (1, 2))]
            for t in threads:
                t.start()
            got = drain(sub, 200)
            for t in threads:
                t.join()
            for p in pubs:
                p.close()
            for s in (1, 2):
                ids = [m.sample_id for m in got if m.sim_id == s]
                assert ids == list(range(100))

    def test_hello_delivered(self, kind):
        with Subscriber(endpoint(kind)) as sub:
            pub = Publisher(sub.endpoint, Hello(4, seed=11))
            assert sub.next(timeout=5) == Hello(4, seed=11)
            pub.close()

    def test_backpressure_no_loss(self, kind):
        with Subscriber(endpoint(kind), types=[SAMPLE], queue_size=4) as sub:
            pub = Publisher(sub.endpoint, queue_size=4)
            rng = np.random.default_rng(3)
            n = 300
            # large frames so kernel socket buffers cannot absorb the stream
            image = rng.random((3, 128, 128)).astype(np.float32)
            beliefs = rng.random((6, 128, 128)).astype(np.float32)
            done = threading.Event()

            def run():
                for i in range(n):
                    pub.publish(SampleMessage(0, i, 8, image, beliefs, np.zeros(6), np.zeros(6, np.uint16), (0.0, 0.0, 5.0), i))
                done.set()

            t = threading.Thread(target=run)
            t.start()
            time.sleep(0.3)
            # the publisher is held back by the slow consumer
            assert not done.is_set()
            got = []
            while len(got) < n:
                got.append(sub.next(timeout=5))
                if len(got) % 50 == 0:
                    time.sleep(0.05)
            t.join()
            pub.close()
            assert [m.sample_id for m in got] == list(range(n))

    def test_late_subscriber_inproc(self):
        ep = endpoint("inproc")
        pub = Publisher(ep)
        pub.publish(Stats(0, published=1))
        with Subscriber(ep) as sub:
            pub.publish(Stats(0, published=2))
            assert sub.next(timeout=1) == Stats(0, published=2)
            with pytest.raises(TimeoutError):
                sub.next(timeout=0.1)

    def test_connection_loss_and_reconnect(self):
        sub = Subscriber(endpoint("tcp"))
        pub = Publisher(sub.endpoint, Hello(5))
        assert sub.next(timeout=5) == Hello(5)
        addr = sub.endpoint
        sub.close()
        with pytest.raises(SessionError):
            for i in range(10_000):
                pub.publish(Stats(5, published=i))
                time.sleep(0.001)
        pub.close(drain=False)
        with pytest.raises(SessionError):
            Publisher(addr, connect_timeout=0.3)

    def test_reconnect_sends_fresh_hello(self):
        with Subscriber(endpoint("tcp")) as sub:
            pub = Publisher(sub.endpoint, Hello(6))
            assert sub.next(timeout=5) == Hello(6)
            pub.reconnect()
            pub.publish(Stats(6, published=1))
            assert sub.next(timeout=5) == Hello(6)
            assert sub.next(timeout=5) == Stats(6, published=1)
            pub.close()


class ListStream(Stream):
    def __init__(self, items, stream_id):
        self.items = list(items)
        self.stream_id = stream_id

    def poll(self, timeout):
        if not self.items:
            raise EndOfStream
        return self.items.pop(0)


class StalledStream(Stream):
    def poll(self, timeout):
        time.sleep(timeout)
        return None


def counting_streams(n):
    return [CallableStream(lambda s=s: s, s) for s in range(n)]


class TestInterleave:
    def test_four_streams(self):
        assert Counter(interleave_batches(counting_streams(4), 8)) == {0: 2, 1: 2, 2: 2, 3: 2}

    def test_three_streams_rotate(self):
        inter = Interleaver(counting_streams(3), 8)
        first = Counter(inter.next_batch())
        second = Counter(inter.next_batch())
        assert sorted(first.values()) == [2, 3, 3]
        assert sorted(second.values()) == [2, 3, 3]
        assert first != second

    def test_single_stream(self):
        assert interleave_batches(counting_streams(1), 5) == [0] * 5

    def test_window_fairness(self):
        S, B = 4, 8
        inter = Interleaver(counting_streams(S), B)
        seq = [x for _ in range(1000) for x in inter.next_batch()]
        window = S * B
        for start in range(0, len(seq) - window + 1, 7):
            c = Counter(seq[start : start + window])
            assert max(c.values()) - min(c.values()) <= 1

    def test_stalled_stream_skipped(self):
        inter = Interleaver([CallableStream(lambda: "a", 0), StalledStream()], 4, poll_timeout=0.01)
        assert inter.next_batch() == ["a"] * 4
        assert inter.skips[1] >= 3

    def test_end_of_data(self):
        inter = Interleaver([ListStream("ab", 0), ListStream("c", 1)], 2)
        assert sorted(inter.next_batch()) == ["a", "c"]
        assert inter.next_batch() == ["b"]
        with pytest.raises(EndOfData):
            inter.next_batch()

    def test_bad_arguments(self):
        with pytest.raises(ValueError):
            Interleaver([], 4)
        with pytest.raises(ValueError):
            Interleaver(counting_streams(1), 0)

    def test_demux_over_subscriber(self, kind):
        with Subscriber(endpoint(kind), types=[SAMPLE]) as sub:
            rng = np.random.default_rng(5)
            pubs = [Publisher(sub.endpoint) for _ in range(2)]
            for i in range(6):
                for s, p in enumerate(pubs):
                    p.publish(random_sample(rng, s, i))
            demux = SubscriberDemux(sub, [0, 1])
            inter = Interleaver([demux.stream(0), demux.stream(1)], 4, poll_timeout=2.0)
            batch = inter.next_batch() + inter.next_batch() + inter.next_batch()
            for p in pubs:
                p.close()
            assert Counter(m.sim_id for m in batch) == {0: 6, 1: 6}
            for s in (0, 1):
                assert [m.sample_id for m in batch if m.sim_id == s] == list(range(6))
