"""A real experiment over TCP on localhost, compressed to about 25 seconds.

One counter process-equivalent (a thread) and a handful of real clients run a
two-round calibration plus the execution round. Client 3 declines one round,
client 4 touches the keyboard mid-window, client 5 never powers down; the
final tallies show exactly that.
"""

import threading
import time

from rollcall.client import (
    ActivityEvent,
    ClientOptions,
    ClientRunner,
    TcpTransport,
    UptimeRecord,
)
from rollcall.counter import CounterService
from rollcall.protocol import ExperimentConfig
from rollcall.timesync import SystemClock

N_CLIENTS = 6
now = int(time.time() * 1000)
config = ExperimentConfig(
    experiment_id="loopback-demo",
    secret="demo-secret",
    epoch_ms=now + 2000,
    delta_t_ms=8_000,
    n_rounds=2,
    delta_tau_ms=2_000,
    t_star_ms=now + 2000 + 16_000,
    grace_ms=2_000,
)

service = CounterService(config, ("127.0.0.1", 0), "/tmp/rollcall-demo.log", fsync=False)
service.start_background()
host, port = service.address
print(f"counter listening on {host}:{port}")


def run_client(i: int) -> None:
    consent = lambda round, deadline: not (round.kind == "CAL" and round.index == 1 and i == 3)
    activity = lambda start, end: [ActivityEvent(start + 300)] if i == 4 else []
    if i == 5:
        uptime = lambda: []
    else:
        uptime = lambda: [
            UptimeRecord("DOWN", config.t_star_ms - 400),
            UptimeRecord("UP", config.t_star_ms + config.delta_tau_ms + 400),
        ]
    runner = ClientRunner(
        config,
        TcpTransport(host, port),
        SystemClock(),
        consent,
        activity,
        uptime,
        options=ClientOptions(nonce=f"demo-cl-{i:02d}", prompt_lead_ms=800, sync_samples=3),
        notify=lambda line, i=i: print(f"  client {i}: {line}"),
    )
    runner.run()


threads = [threading.Thread(target=run_client, args=(i,)) for i in range(N_CLIENTS)]
for t in threads:
    t.start()
for t in threads:
    t.join()

while int(time.time() * 1000) <= config.window_close(config.rounds()[-1]):
    time.sleep(0.1)
counts, n_star = service.snapshot_distribution()
service.shutdown()

print(f"\ncalibration counts: {counts}   (client 4 violates every window)")
print(f"execution count   : {n_star}   (clients 4* and 5 never certified; 3 did)")
print("counter log       : /tmp/rollcall-demo.log  (try: rollcall analyze --log ...)")
print("* client 4's violations only matter in calibration; it powered down fine")
