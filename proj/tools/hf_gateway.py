#!/usr/bin/env python3
# Copyright 2026 The looptrap Authors
# SPDX-License-Identifier: Apache-2.0
"""Model gateway for Hugging Face causal LMs, speaking the looptrap JSON protocol.

Usage:
  hf_gateway.py --model Qwen/Qwen2.5-0.5B-Instruct --port 8765
  hf_gateway.py --random-tiny --port 8765     # untrained char-level GPT-2, no download

Point looptrap at it with a model identifier of the form http://127.0.0.1:8765
or set LOOPTRAP_HF_ENDPOINT for the acceptance suite.
"""

import argparse
import json
import logging
import math
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import torch

log = logging.getLogger("hf_gateway")

SENTINEL = "@@LOOPTRAP_USER_TEXT@@"


class GatewayError(Exception):
    def __init__(self, kind, message, status=400):
        super().__init__(message)
        self.kind = kind
        self.status = status


def build_random_tiny(seed):
    from tokenizers import Tokenizer, models, pre_tokenizers, decoders
    from transformers import GPT2Config, GPT2LMHeadModel, PreTrainedTokenizerFast

    specials = ["<|pad|>", "<|eos|>", "<|system|>", "<|user|>", "<|assistant|>", "<|end|>"]
    chars = list(" abcdefghijklmnopqrstuvwxyz*%&@#.,!?'0123456789-:;()/<>\n+=")
    vocab = {tok: i for i, tok in enumerate(specials + chars)}
    core = Tokenizer(models.WordLevel(vocab=vocab, unk_token="<|pad|>"))
    core.pre_tokenizer = pre_tokenizers.Split(pattern="", behavior="isolated")
    core.decoder = decoders.Fuse()
    tok = PreTrainedTokenizerFast(tokenizer_object=core, eos_token="<|eos|>", pad_token="<|pad|>",
                                  additional_special_tokens=specials[2:])
    torch.manual_seed(seed)
    cfg = GPT2Config(vocab_size=len(vocab), n_positions=512, n_embd=32, n_layer=2, n_head=2,
                     eos_token_id=vocab["<|eos|>"], bos_token_id=vocab["<|eos|>"])
    model = GPT2LMHeadModel(cfg)
    template = {"system_text": "<|system|>be helpful.<|end|>", "user_prefix": "<|user|>",
                "user_suffix": "<|end|>", "assistant_prefix": "<|assistant|>"}
    return "random-tiny", tok, model, template


def split_chat_template(tok):
    if not getattr(tok, "chat_template", None):
        return {"system_text": "", "user_prefix": "User: ", "user_suffix": "\n", "assistant_prefix": "Assistant:"}
    rendered = tok.apply_chat_template([{"role": "user", "content": SENTINEL}], tokenize=False,
                                       add_generation_prompt=True)
    before, after = rendered.split(SENTINEL, 1)
    return {"system_text": "", "user_prefix": before, "user_suffix": "", "assistant_prefix": after}


class Backend:
    def __init__(self, args):
        self.lock = threading.Lock()
        self.device = torch.device(args.device)
        self.dtype = {"float32": torch.float32, "float64": torch.float64, "bfloat16": torch.bfloat16}[args.dtype]
        if args.random_tiny:
            self.name, self.tok, self.model, self.template = build_random_tiny(args.seed)
        else:
            from transformers import AutoModelForCausalLM, AutoTokenizer
            self.name = args.model
            self.tok = AutoTokenizer.from_pretrained(args.model)
            self.model = AutoModelForCausalLM.from_pretrained(args.model, attn_implementation="eager")
            self.template = split_chat_template(self.tok)
        if hasattr(self.model, "set_attn_implementation"):
            self.model.set_attn_implementation("eager")
        self.model.to(device=self.device, dtype=self.dtype).eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.vocab_size = self.model.get_output_embeddings().weight.shape[0]
        n_tok = len(self.tok)
        pieces = self.tok.convert_ids_to_tokens(list(range(min(n_tok, self.vocab_size))))
        pieces += [f"<|unused_{i}|>" for i in range(len(pieces), self.vocab_size)]
        self.pieces = [p if p is not None else f"<|unused_{i}|>" for i, p in enumerate(pieces)]
        self.special_ids = sorted(set(i for i in self.tok.all_special_ids if i < self.vocab_size)
                                  | set(range(n_tok, self.vocab_size)))
        stops = self.model.generation_config.eos_token_id
        if stops is None:
            stops = self.tok.eos_token_id
        self.stop_ids = sorted(set(stops if isinstance(stops, list) else [stops] if stops is not None else []))
        self.eos_id = self.tok.eos_token_id if self.tok.eos_token_id is not None else (
            self.stop_ids[0] if self.stop_ids else None)
        self.context = int(getattr(self.model.config, "max_position_embeddings", 0) or args.context)
        if args.context:
            self.context = min(self.context, args.context)

    # -- helpers ---------------------------------------------------------
    def check(self, ids):
        for t in ids:
            if not isinstance(t, int) or t < 0 or t >= self.vocab_size:
                raise GatewayError("out_of_range", f"token id {t} outside vocabulary")
        if len(ids) > self.context:
            raise GatewayError("context_overflow", f"{len(ids)} tokens exceed context {self.context}")

    def logits(self, ids, **kw):
        x = torch.tensor([ids], device=self.device)
        return self.model(input_ids=x, **kw)

    # -- endpoints -------------------------------------------------------
    def info(self, _):
        return {"id": self.name, "pieces": self.pieces, "special_ids": self.special_ids,
                "eos_id": self.eos_id, "context_length": self.context, "chat_template": self.template,
                "capabilities": {"differentiable": True, "attention": True, "logits": True}}

    def encode(self, body):
        return {"tokens": self.tok(body["text"], add_special_tokens=False)["input_ids"]}

    def decode(self, body):
        return {"text": self.tok.decode(body["tokens"], skip_special_tokens=False,
                                        clean_up_tokenization_spaces=False)}

    def next_distributions(self, body):
        prompt, cont = body["prompt"], body["continuation"]
        if not prompt:
            raise GatewayError("invalid_argument", "prompt must be non-empty")
        ids = prompt + cont[:-1] if cont else prompt
        self.check(prompt + cont)
        with torch.no_grad():
            z = self.logits(ids).logits[0].double()
        rows = z[len(prompt) - 1:len(prompt) - 1 + len(cont)]
        return {"probs": torch.softmax(rows, dim=-1).cpu().tolist()}

    def one_hot_gradient(self, body):
        prompt, cont = body["prompt"], body["continuation"]
        begin, end = body["span"]
        loss_spec = body["loss"]
        if loss_spec.get("kind") != "cycle":
            raise GatewayError("invalid_argument", f"unsupported loss kind {loss_spec.get('kind')!r}")
        if not (0 <= begin <= end <= len(prompt)) or not cont:
            raise GatewayError("invalid_argument", "bad suffix span or empty continuation")
        self.check(prompt + cont)
        ids = torch.tensor(prompt + cont[:-1], device=self.device)
        emb = self.model.get_input_embeddings().weight
        one_hot = torch.zeros(end - begin, self.vocab_size, device=self.device, dtype=emb.dtype)
        one_hot[torch.arange(end - begin), ids[begin:end]] = 1.0
        one_hot.requires_grad_(True)
        base = emb[ids].detach()
        embeds = torch.cat([base[:begin], one_hot @ emb, base[end:]], dim=0).unsqueeze(0)
        z = self.model(inputs_embeds=embeds).logits[0].double()
        probs = torch.softmax(z[len(prompt) - 1:len(prompt) - 1 + len(cont)], dim=-1)
        targets = sorted(set(loss_spec["tokens"]))
        mass = probs[:, targets].sum(dim=-1).clamp_min(float(loss_spec.get("floor", 1e-12)))
        loss = -torch.log(mass).mean()
        loss.backward()
        return {"values": one_hot.grad.double().cpu().tolist(), "loss": float(loss.item())}

    def _step_dist(self, z, policy, eos_enabled):
        z = z.double().clone()
        if not eos_enabled:
            z[self.stop_ids] = -math.inf
        if policy["kind"] == "temperature":
            z = z / float(policy["temperature"])
        p = torch.softmax(z, dim=-1)
        ent = float(-(p[p > 0] * torch.log(p[p > 0])).sum().item())
        return p, max(ent, 0.0)

    def generate(self, body):
        prompt, policy = body["prompt"], body["policy"]
        max_new, eos_enabled = int(body["max_new"]), bool(body.get("eos_enabled", True))
        if not prompt or max_new < 1:
            raise GatewayError("invalid_argument", "prompt must be non-empty and max_new >= 1")
        self.check(prompt)
        if len(prompt) + max_new > self.context:
            raise GatewayError("context_overflow", f"{len(prompt)} + {max_new} tokens exceed context {self.context}")
        if policy["kind"] == "beam":
            return self._beam(prompt, policy, max_new, eos_enabled)
        gen = torch.Generator(device="cpu").manual_seed(int(policy.get("seed", 0)))
        out, ents = [], []
        with torch.no_grad():
            res = self.logits(prompt, use_cache=True)
            for i in range(max_new):
                p, ent = self._step_dist(res.logits[0, -1], policy, eos_enabled)
                if policy["kind"] == "temperature":
                    nxt = int(torch.multinomial(p.cpu(), 1, generator=gen).item())
                else:
                    nxt = int(torch.argmax(p).item())
                if eos_enabled and nxt in self.stop_ids:
                    break
                out.append(nxt)
                ents.append(ent)
                if i + 1 < max_new:
                    res = self.model(input_ids=torch.tensor([[nxt]], device=self.device),
                                     past_key_values=res.past_key_values, use_cache=True)
        return {"output": out, "step_entropies": ents}

    def _beam(self, prompt, policy, max_new, eos_enabled):
        width = int(policy["beam_width"])
        live = [(0.0, [], [])]
        finished = []
        with torch.no_grad():
            for _ in range(max_new):
                expansions = []
                for h, (lp, toks, ents) in enumerate(live):
                    z = self.logits(prompt + toks).logits[0, -1]
                    p, ent = self._step_dist(z, {"kind": "beam"}, eos_enabled)
                    logp = torch.log(p)
                    for t in torch.nonzero(p > 0).flatten().tolist():
                        expansions.append((lp + float(logp[t]), h, t, ent))
                expansions.sort(key=lambda e: (-e[0], e[1], e[2]))
                nxt = []
                for score, h, t, ent in expansions:
                    if len(nxt) == width:
                        break
                    _, toks, ents = live[h]
                    if eos_enabled and t in self.stop_ids:
                        finished.append((score / max(len(toks), 1), toks, ents))
                        continue
                    nxt.append((score, toks + [t], ents + [ent]))
                live = nxt
                if not live or len(finished) >= width:
                    break
        best = max(((s / max(len(t), 1), t, e) for s, t, e in live), key=lambda x: x[0], default=None)
        best_f = max(finished, key=lambda x: x[0], default=None)
        pick = best if best is not None and (best_f is None or best[0] >= best_f[0]) else best_f
        return {"output": pick[1] if pick else [], "step_entropies": pick[2] if pick else []}

    def attention(self, body):
        prompt, cont = body["prompt"], body["continuation"]
        seq = prompt + cont
        if not seq:
            raise GatewayError("invalid_argument", "attention needs a non-empty sequence")
        self.check(seq)
        start = int(body.get("query_start", 0))
        with torch.no_grad():
            att = self.logits(seq, output_attentions=True).attentions
        rows = torch.stack([a[0, :, start:, :] for a in att]).double()
        layers, heads, queries, keys = rows.shape
        return {"layers": layers, "heads": heads, "queries": queries, "keys": keys, "query_offset": start,
                "weights": rows.flatten().cpu().tolist()}


def make_handler(backend):
    routes = {"/encode": backend.encode, "/decode": backend.decode,
              "/next_distributions": backend.next_distributions, "/one_hot_gradient": backend.one_hot_gradient,
              "/generate": backend.generate, "/attention": backend.attention}

    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def _send(self, status, payload):
            data = json.dumps(payload).encode()
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def _run(self, fn, body):
            try:
                with backend.lock:
                    self._send(200, fn(body))
            except GatewayError as e:
                self._send(e.status, {"error": e.kind, "message": str(e)})
            except (KeyError, TypeError, ValueError) as e:
                self._send(400, {"error": "invalid_argument", "message": repr(e)})
            except Exception as e:  # noqa: BLE001
                log.exception("request failed")
                self._send(500, {"error": "internal", "message": repr(e)})

        def do_GET(self):
            if self.path == "/info":
                self._run(backend.info, {})
            else:
                self._send(404, {"error": "not_found", "message": self.path})

        def do_POST(self):
            fn = routes.get(self.path)
            length = int(self.headers.get("Content-Length", 0))
            raw = self.rfile.read(length) if length else b"{}"
            if fn is None:
                self._send(404, {"error": "not_found", "message": self.path})
                return
            try:
                body = json.loads(raw)
            except json.JSONDecodeError as e:
                self._send(400, {"error": "invalid_argument", "message": str(e)})
                return
            self._run(fn, body)

        def log_message(self, fmt, *args):
            log.debug(fmt, *args)

    return Handler


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    src = ap.add_mutually_exclusive_group(required=True)
    src.add_argument("--model", help="Hugging Face model name or local path")
    src.add_argument("--random-tiny", action="store_true", help="serve an untrained char-level GPT-2")
    ap.add_argument("--host", default="127.0.0.1")
    ap.add_argument("--port", type=int, default=8765)
    ap.add_argument("--device", default="cuda" if torch.cuda.is_available() else "cpu")
    ap.add_argument("--dtype", default="float32", choices=["float32", "float64", "bfloat16"])
    ap.add_argument("--context", type=int, default=0, help="cap the advertised context length")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO)
    if args.random_tiny and not args.context:
        args.context = 512
    backend = Backend(args)
    server = ThreadingHTTPServer((args.host, args.port), make_handler(backend))
    log.info("serving %s on http://%s:%d", backend.name, args.host, server.server_address[1])
    print(f"READY http://{args.host}:{server.server_address[1]}", flush=True)
    server.serve_forever()


if __name__ == "__main__":
    main()
