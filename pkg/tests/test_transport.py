from __future__ import annotations

import random
import socket
import threading

import pytest

from privflow.features import WORD_MOD
from privflow.knn import build_kdtree, serialize_topology
from privflow.masking import MaskVector, MaskedTuple
from privflow.transport import (
    Ack,
    AlarmMsg,
    ChannelClosed,
    FrameDecoder,
    HandshakeFailed,
    InMemoryNetwork,
    MaskMsg,
    OversizeFrame,
    PrelimMsg,
    PROTOCOL_VERSION,
    SocketChannel,
    TopologyMsg,
    TruncatedFrame,
    TupleMsg,
    UnknownType,
    accept_channel,
    decode_frame,
    encode_frame,
    open_channel,
)
from tests.test_knn import random_instances


def random_message(rng: random.Random):
    kind = rng.randrange(6)
    serial = rng.randrange(1 << 32)
    time = rng.randrange(1 << 32)
    if kind == 0:
        return TupleMsg(
            MaskedTuple(serial, time, tuple(rng.randrange(WORD_MOD) for _ in range(5)))
        )
    if kind == 1:
        return MaskMsg(
            MaskVector(serial, time, tuple(rng.randrange(WORD_MOD) for _ in range(5)))
        )
    if kind == 2:
        return TopologyMsg(serialize_topology(build_kdtree(
            random_instances(rng, rng.randint(1, 12))
        )))
    if kind == 3:
        n = rng.randint(0, 20)
        return PrelimMsg(
            serial,
            time,
            tuple(
                tuple(rng.randrange(WORD_MOD) for _ in range(5)) for _ in range(n)
            ),
        )
    if kind == 4:
        return AlarmMsg(serial, time, rng.randrange(1 << 16))
    return Ack()


class TestFrameCodec:
    def test_ack_is_five_bytes(self):
        assert encode_frame(Ack()) == bytes([0, 0, 0, 1, 6])

    def test_tuple_frame_layout(self):
        msg = TupleMsg(MaskedTuple(0, 0, (0, 0, 0, 0, 0)))
        frame = encode_frame(msg)
        assert frame[:4] == (30).to_bytes(4, "big")
        assert frame[4] == 0x01
        assert frame[5:] == bytes(29)

    def test_roundtrip_fuzz(self):
        rng = random.Random(1234)
        for _ in range(10_000):
            msg = random_message(rng)
            assert decode_frame(encode_frame(msg)) == msg

    def test_unknown_type(self):
        with pytest.raises(UnknownType):
            decode_frame(bytes([0, 0, 0, 1, 0x7F]))

    def test_truncated(self):
        frame = encode_frame(TupleMsg(MaskedTuple(0, 0, (0,) * 5)))
        with pytest.raises(TruncatedFrame):
            decode_frame(frame[:-1])
        with pytest.raises(TruncatedFrame):
            decode_frame(b"\x00\x00")

    def test_oversize_rejected_on_decode(self):
        huge = (64 * 1024 * 1024 + 2).to_bytes(4, "big") + b"\x01"
        with pytest.raises(OversizeFrame):
            decode_frame(huge)

    def test_alarm_payload_is_11_bytes(self):
        frame = encode_frame(AlarmMsg(3, 4, 5))
        assert frame[:4] == (12).to_bytes(4, "big")
        assert len(frame) == 16

    def test_prelim_bit_layout(self):
        # serial 33b | time 33b | count 32b | rows of 5 x 33b, zero padded:
        # an empty prelim is 98 bits -> 13 bytes; one row adds 165 bits
        empty = encode_frame(PrelimMsg(0, 0, ()))
        assert empty[:4] == (14).to_bytes(4, "big")
        assert empty[5:] == bytes(13)
        one_row = encode_frame(PrelimMsg(0, 0, ((0, 0, 0, 0, 0),)))
        assert len(one_row) - 5 == (98 + 165 + 7) // 8
        # count field starts at bit 66; count=1 sets bit 97 (msb-first)
        payload = encode_frame(PrelimMsg(0, 0, ((0, 0, 0, 0, 0),)))[5:]
        assert payload[97 // 8] == 1 << (7 - 97 % 8)


class TestFrameDecoder:
    def test_rechunking_fuzz(self):
        rng = random.Random(77)
        messages = [random_message(rng) for _ in range(500)]
        stream = b"".join(encode_frame(m) for m in messages)
        # slice the byte stream at arbitrary boundaries
        for trial in range(20):
            decoder = FrameDecoder()
            out = []
            pos = 0
            while pos < len(stream):
                step = rng.randint(1, 97)
                out.extend(decoder.feed(stream[pos : pos + step]))
                pos += step
            assert out == messages
            assert decoder.pending_bytes == 0

    def test_single_byte_feed(self):
        msg = PrelimMsg(1, 2, ((1, 2, 3, 4, 5),))
        decoder = FrameDecoder()
        out = []
        for byte in encode_frame(msg):
            out.extend(decoder.feed(bytes([byte])))
        assert out == [msg]

    def test_garbage_length_rejected(self):
        decoder = FrameDecoder()
        with pytest.raises(OversizeFrame):
            list(decoder.feed(b"\xff\xff\xff\xff\x01"))


class TestInMemoryNetwork:
    def test_pair_delivery_order(self):
        net = InMemoryNetwork()
        a, b = net.pair("a", "b")
        for i in range(10):
            a.send(AlarmMsg(1, i, 0))
        received = [b.recv() for _ in range(10)]
        assert [m.time for m in received] == list(range(10))

    def test_send_exercises_codec(self):
        net = InMemoryNetwork()
        a, b = net.pair("a", "b")
        msg = MaskMsg(MaskVector(1, 2, (3, 4, 5, 6, 7)))
        a.send(msg)
        assert b.recv() == msg

    def test_closed_peer(self):
        net = InMemoryNetwork()
        a, b = net.pair("a", "b")
        b.close()
        with pytest.raises(ChannelClosed):
            a.send(Ack())

    def test_recv_with_no_traffic(self):
        net = InMemoryNetwork()
        a, _ = net.pair("a", "b")
        with pytest.raises(ChannelClosed):
            a.recv()

    def test_service_pump(self):
        net = InMemoryNetwork()
        client, server = net.pair("client", "server")
        net.register(server, lambda msg: server.send(Ack()))
        client.send(AlarmMsg(0, 0, 0))
        assert client.recv() == Ack()


def echo_server():
    """Loopback echo accepting one connection; returns (port, thread)."""
    listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    listener.bind(("127.0.0.1", 0))
    listener.listen(1)
    port = listener.getsockname()[1]

    def serve():
        conn, _ = listener.accept()
        channel = accept_channel(conn)
        try:
            while True:
                channel.send(channel.recv())
        except ChannelClosed:
            pass
        finally:
            listener.close()

    thread = threading.Thread(target=serve, daemon=True)
    thread.start()
    return port, thread


class TestSocketChannel:
    def test_plain_refused_without_flag(self):
        with pytest.raises(HandshakeFailed):
            open_channel("127.0.0.1:1", "PLAIN")

    def test_secure_requires_context(self):
        with pytest.raises(HandshakeFailed):
            open_channel("127.0.0.1:1", "SECURE")

    def test_connect_failed(self):
        from privflow.transport import ConnectFailed

        # bind-then-close to get a port nothing listens on
        probe = socket.socket()
        probe.bind(("127.0.0.1", 0))
        port = probe.getsockname()[1]
        probe.close()
        with pytest.raises(ConnectFailed):
            open_channel(f"127.0.0.1:{port}", "PLAIN", allow_insecure=True)

    def test_loopback_echo_in_order(self):
        port, thread = echo_server()
        channel = open_channel(f"127.0.0.1:{port}", "PLAIN", allow_insecure=True)
        rng = random.Random(5)
        messages = [random_message(rng) for _ in range(1000)]
        received = []
        for msg in messages:
            channel.send(msg)
            received.append(channel.recv())
        assert received == messages
        channel.close()
        thread.join(timeout=5)

    def test_version_byte_opens_connection(self):
        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.bind(("127.0.0.1", 0))
        listener.listen(1)
        port = listener.getsockname()[1]
        seen = {}

        def serve():
            conn, _ = listener.accept()
            seen["first_byte"] = conn.recv(1)
            conn.sendall(bytes([PROTOCOL_VERSION]))
            conn.close()
            listener.close()

        thread = threading.Thread(target=serve, daemon=True)
        thread.start()
        open_channel(f"127.0.0.1:{port}", "PLAIN", allow_insecure=True)
        thread.join(timeout=5)
        assert seen["first_byte"] == bytes([PROTOCOL_VERSION])

    def test_version_mismatch_rejected(self):
        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.bind(("127.0.0.1", 0))
        listener.listen(1)
        port = listener.getsockname()[1]

        def serve():
            conn, _ = listener.accept()
            conn.recv(1)
            conn.sendall(b"\x02")  # wrong version
            conn.close()
            listener.close()

        threading.Thread(target=serve, daemon=True).start()
        with pytest.raises(HandshakeFailed):
            open_channel(f"127.0.0.1:{port}", "PLAIN", allow_insecure=True)


def _self_signed_cert(tmp_path):
    """Throwaway localhost certificate for the TLS loopback test."""
    import datetime
    import ipaddress as ipaddress_mod

    pytest.importorskip("cryptography")
    from cryptography import x509
    from cryptography.hazmat.primitives import hashes, serialization
    from cryptography.hazmat.primitives.asymmetric import rsa
    from cryptography.x509.oid import NameOID

    key = rsa.generate_private_key(public_exponent=65537, key_size=2048)
    name = x509.Name([x509.NameAttribute(NameOID.COMMON_NAME, "127.0.0.1")])
    now = datetime.datetime.now(datetime.timezone.utc)
    cert = (
        x509.CertificateBuilder()
        .subject_name(name)
        .issuer_name(name)
        .public_key(key.public_key())
        .serial_number(x509.random_serial_number())
        .not_valid_before(now - datetime.timedelta(minutes=5))
        .not_valid_after(now + datetime.timedelta(hours=1))
        .add_extension(
            x509.SubjectAlternativeName(
                [x509.IPAddress(ipaddress_mod.ip_address("127.0.0.1"))]
            ),
            critical=False,
        )
        .sign(key, hashes.SHA256())
    )
    cert_path = tmp_path / "cert.pem"
    key_path = tmp_path / "key.pem"
    cert_path.write_bytes(cert.public_bytes(serialization.Encoding.PEM))
    key_path.write_bytes(
        key.private_bytes(
            serialization.Encoding.PEM,
            serialization.PrivateFormat.TraditionalOpenSSL,
            serialization.NoEncryption(),
        )
    )
    return cert_path, key_path


class TestSecureChannel:
    def test_tls_loopback_echo(self, tmp_path):
        import ssl

        cert_path, key_path = _self_signed_cert(tmp_path)
        server_ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_SERVER)
        server_ctx.load_cert_chain(str(cert_path), str(key_path))
        client_ctx = ssl.create_default_context(cafile=str(cert_path))

        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.bind(("127.0.0.1", 0))
        listener.listen(1)
        port = listener.getsockname()[1]

        def serve():
            conn, _ = listener.accept()
            channel = accept_channel(conn, server_ctx)
            try:
                while True:
                    channel.send(channel.recv())
            except ChannelClosed:
                pass
            finally:
                listener.close()

        threading.Thread(target=serve, daemon=True).start()
        channel = open_channel(
            f"127.0.0.1:{port}", "SECURE", ssl_context=client_ctx
        )
        rng = random.Random(99)
        for _ in range(50):
            msg = random_message(rng)
            channel.send(msg)
            assert channel.recv() == msg
        channel.close()

    def test_untrusted_cert_fails_handshake(self, tmp_path):
        import ssl

        cert_path, key_path = _self_signed_cert(tmp_path)
        server_ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_SERVER)
        server_ctx.load_cert_chain(str(cert_path), str(key_path))
        strict_client = ssl.create_default_context()  # trusts nothing here

        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.bind(("127.0.0.1", 0))
        listener.listen(1)
        port = listener.getsockname()[1]

        def serve():
            try:
                conn, _ = listener.accept()
                accept_channel(conn, server_ctx)
            except Exception:
                pass
            finally:
                listener.close()

        threading.Thread(target=serve, daemon=True).start()
        with pytest.raises(HandshakeFailed):
            open_channel(f"127.0.0.1:{port}", "SECURE", ssl_context=strict_client)
