"""Run a frozen pretrained text encoder over prompts and export its features."""

from .writer import FeatureWriteError, write_feature_file


def load_prompts(prompts_path):
    with open(prompts_path, encoding="utf-8") as fh:
        prompts = [line.rstrip("\n") for line in fh]
    prompts = [p for p in prompts if p.strip()]
    if not prompts:
        raise FeatureWriteError(f"no prompts in {prompts_path}")
    return prompts


def export_features(encoder_name, prompts_path, out_path, max_tokens: int = 128):
    """Tokenize, truncate to max_tokens, run the encoder, write last hidden states.

    encoder_name is anything transformers can load (hub id or local path).
    The encoder stays frozen; features are cast to float32 on disk. Returns
    the number of records written.
    """
    import torch
    from transformers import AutoModel, AutoTokenizer

    prompts = load_prompts(prompts_path)
    tokenizer = AutoTokenizer.from_pretrained(encoder_name)
    model = AutoModel.from_pretrained(encoder_name)
    model.eval()

    records = []
    with torch.no_grad():
        for i, prompt in enumerate(prompts):
            enc = tokenizer(prompt, truncation=True, max_length=max_tokens,
                            return_tensors="pt")
            hidden = model(**enc).last_hidden_state[0]
            records.append((f"prompt-{i:05d}", hidden.to(torch.float32).cpu().numpy()))
    write_feature_file(out_path, records)
    return len(records)
