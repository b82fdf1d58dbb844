"""The shipped top-40 probe sets, one per protocol."""

from __future__ import annotations

from importlib import resources
from pathlib import Path

COMMON = (
    "Fragment[l:IP;t:maxDist;maxdist:16]",
    "Insert[p:I3;f:P;d:altProto;option:]",
    "Mutate[l:TCP;f:seq;option:negativeSeqWithPadding]",
    "Fragment[l:IP;t:outorder]",
    "Fragment[l:IP;t:overlapping;position:lshortrequal]",
    "Mutate[l:IP;f:option;option:noop]",
    "Mutate[l:TCP;f:checksum;checksum:corrupt]",
    "Mutate[l:TCP;f:urgentPointer;option:noack]",
    "Insert[p:I3;f:P;d:controlRequest;option:]",
    "Mutate[l:TCP;f:option;option:timestamp]",
    "Mutate[l:TCP;f:urgentPointer;option:]",
    "Fragment[l:TCP;t:overlapping;position:lequalrlong]",
    "Insert[p:I3;f:PA;d:controlRequest;option:checksum]",
    "Fragment[l:IP;t:fragmentNum;num:55]",
    "Mutate[l:IP;f:flag;flags:M]",
    "Fragment[l:TCP;t:overlapping;position:llongrshort]",
    "Mutate[l:IP;f:flag;flags:E]",
    "Mutate[l:TCP;f:option;option:md5]",
    "Fragment[l:TCP;t:fragmentSize;size:8]",
    "Fragment[l:IP;t:overlapping;position:llongrlong]",
    "Fragment[l:TCP;t:overlapping;position:lshortrequal]",
)

HTTP_ONLY = (
    "Fragment[l:IP;t:overlapping;position:lshortrshort]",
    "Mutate[l:App;t:http;f:version;value:HTTP: 1.1]",
    "Fragment[l:TCP;t:overlapping;position:lequalrequal]",
    "Mutate[l:App;t:http;f:method;value:GE]",
    "Insert[p:I1;f:A;d:controlRequest;option:md5]",
    "Mutate[l:TCP;f:flag;flags:SAFPU]",
    "Mutate[l:App;t:domain;c:prepend;char:star]",
    "Mutate[l:App;t:http;f:version;value:HTTP:3]",
    "Mutate[l:App;t:http;f:delimiter;char:09]",
    "Insert[p:I1;f:PU;d:controlRequest;option:timestamp]",
    "Insert[p:I3;f:R;d:;option:checksum]",
    "Mutate[l:App;t:http;f:request;option:tworequest]",
    "Mutate[l:App;t:http;f:delimiter;char:0b]",
    "Mutate[l:App;t:http;f:method;value:GeT]",
    "Insert[p:I3;f:R;d:controlRequest;option:checksum]",
    "Mutate[l:App;t:http;f:delimiter;char:r]",
    "Mutate[l:App;t:http;f:delimiter;char:n]",
    "Insert[p:I1;f:PU;d:controlRequest;option:checksum]",
    "Insert[p:I1;f:PAU;d:controlRequest;option:]",
)

HTTPS_ONLY = (
    "Insert[p:I3;f:PA;d:random;option:checksum]",
    "Mutate[l:App;t:domain;c:append;char:space]",
    "Mutate[l:App;t:tls;f:recordVersion;value:0304]",
    "Insert[p:I1;f:PU;d:controlRequest;option:outwindowSeq]",
    "Mutate[l:TCP;f:flag;flags:P]",
    "Fragment[l:TCP;t:fragmentNum;num:8]",
    "Fragment[l:TCP;t:fragmentNum;num:32]",
    "Fragment[l:TCP;t:overlapping;position:lequalrequal]",
    "Mutate[l:App;t:domain;c:append;char:star]",
    "Mutate[l:App;t:domain;c:prepend;char:space]",
    "Insert[p:I3;f:PU;d:controlRequest;option:inwindowSeq]",
    "Insert[p:I3;f:RA;d:;option:checksum]",
    "Mutate[l:App;t:tls;f:recordVersion;value:03ff]",
    "Mutate[l:App;t:tls;f:legacyVersion;value:0000]",
    "Insert[p:I2;f:PU;d:controlRequest;option:outwindowSeq]",
    "Insert[p:I2;f:RP;d:controlRequest;option:checksum]",
    "Insert[p:I2;f:PU;d:controlRequest;option:checksum]",
    "Insert[p:I3;f:P;d:altProto;option:outwindowSeq]",
    "Mutate[l:TCP;f:flag;flags:]",
)


def top40_ids(protocol: str) -> tuple:
    return COMMON + (HTTP_ONLY if protocol.lower() == "http" else HTTPS_ONLY)


def data_dir() -> Path:
    return Path(str(resources.files("dpiprint") / "data"))


def builtin_dir(protocol: str) -> Path:
    return data_dir() / "top40" / protocol.lower()


def load_builtin(protocol: str) -> list:
    """The shipped top-40 probes for ``protocol``, in the shipped order."""
    from .generate import load_probe_set

    return load_probe_set(builtin_dir(protocol))


def baseline_probe():
    from .probe import load_probe

    return load_probe(data_dir() / "baseline.yaml")
