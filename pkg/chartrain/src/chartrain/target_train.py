"""Tiny character-level language model used as an optimization target.

Trains a one-hidden-layer network to predict the next character of an
embedded text and reports the validation loss in bits per byte.  The file
is deliberately self-contained: optimization harnesses copy it into a
scratch repository and edit the hyperparameter block below, so it must
run alone, quickly, and deterministically.
"""

import os

# keep linear algebra single-threaded: reproducibility matters more
# than speed at this size
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np

# --- hyperparameters -------------------------------------------------
learning_rate = 0.5   # SGD step size; must be positive
hidden_width = 24     # hidden units; must be at least 1
iterations = 240      # training steps; improving range 0 to 960
seed = 7              # RNG seed; a fixed seed gives an identical metric
context = 3           # characters of context per prediction
batch_size = 256      # examples per training step
# ---------------------------------------------------------------------

# A few kilobytes of public-domain prose (Lincoln's Gettysburg Address,
# the openings of Moby-Dick and Pride and Prejudice, and two fables of
# Aesop), lowercased and whitespace-collapsed before use.
CORPUS = """
Four score and seven years ago our fathers brought forth on this
continent, a new nation, conceived in Liberty, and dedicated to the
proposition that all men are created equal. Now we are engaged in a
great civil war, testing whether that nation, or any nation so
conceived and so dedicated, can long endure. We are met on a great
battle-field of that war. We have come to dedicate a portion of that
field, as a final resting place for those who here gave their lives
that that nation might live. It is altogether fitting and proper that
we should do this. But, in a larger sense, we can not dedicate -- we
can not consecrate -- we can not hallow -- this ground. The brave men,
living and dead, who struggled here, have consecrated it, far above
our poor power to add or detract. The world will little note, nor
long remember what we say here, but it can never forget what they did
here. It is for us the living, rather, to be dedicated here to the
unfinished work which they who fought here have thus far so nobly
advanced. It is rather for us to be here dedicated to the great task
remaining before us -- that from these honored dead we take increased
devotion to that cause for which they gave the last full measure of
devotion -- that we here highly resolve that these dead shall not
have died in vain -- that this nation, under God, shall have a new
birth of freedom -- and that government of the people, by the people,
for the people, shall not perish from the earth.
Call me Ishmael. Some years ago -- never mind how long precisely --
having little or no money in my purse, and nothing particular to
interest me on shore, I thought I would sail about a little and see
the watery part of the world. It is a way I have of driving off the
spleen and regulating the circulation. Whenever I find myself growing
grim about the mouth; whenever it is a damp, drizzly November in my
soul; whenever I find myself involuntarily pausing before coffin
warehouses, and bringing up the rear of every funeral I meet; and
especially whenever my hypos get such an upper hand of me, that it
requires a strong moral principle to prevent me from deliberately
stepping into the street, and methodically knocking people's hats off
-- then, I account it high time to get to sea as soon as I can. This
is my substitute for pistol and ball. With a philosophical flourish
Cato throws himself upon his sword; I quietly take to the ship. There
is nothing surprising in this. If they but knew it, almost all men in
their degree, some time or other, cherish very nearly the same
feelings towards the ocean with me.
It is a truth universally acknowledged, that a single man in
possession of a good fortune, must be in want of a wife. However
little known the feelings or views of such a man may be on his first
entering a neighbourhood, this truth is so well fixed in the minds of
the surrounding families, that he is considered as the rightful
property of some one or other of their daughters. My dear Mr. Bennet,
said his lady to him one day, have you heard that Netherfield Park is
let at last? Mr. Bennet replied that he had not. But it is, returned
she; for Mrs. Long has just been here, and she told me all about it.
Mr. Bennet made no answer. Do not you want to know who has taken it?
cried his wife impatiently. You want to tell me, and I have no
objection to hearing it. This was invitation enough.
A hungry Fox saw some fine bunches of Grapes hanging from a vine that
was trained along a high trellis, and did his best to reach them by
jumping as high as he could into the air. But it was all in vain, for
they were just out of reach: so he gave up trying, and walked away
with an air of dignity and unconcern, remarking, I thought those
Grapes were ripe, but I see now they are quite sour.
A Crow was sitting on a branch of a tree with a piece of cheese in
her beak when a Fox observed her and set his wits to work to discover
some way of getting the cheese. Coming and standing under the tree he
looked up and said, What a noble bird I see above me! Her beauty is
without equal, the hue of her plumage exquisite. If only her voice is
as sweet as her looks are fair, she ought without doubt to be Queen
of the Birds. The Crow was hugely flattered by this, and just to show
the Fox that she could sing she gave a loud caw. Down came the
cheese, of course, and the Fox, snatching it up, said, You have a
voice, madam, I see: what you want is wits.
"""


def normalize(text: str) -> str:
    return " ".join(text.lower().split())


def build_dataset(text: str, window: int):
    alphabet = sorted(set(text))
    index = {ch: i for i, ch in enumerate(alphabet)}
    ids = np.array([index[ch] for ch in text], dtype=np.int64)
    positions = len(ids) - window
    vocab = len(alphabet)
    one_hot = np.zeros((positions, window * vocab), dtype=np.float64)
    for offset in range(window):
        one_hot[np.arange(positions), offset * vocab + ids[offset:offset + positions]] = 1.0
    targets = ids[window:]
    return one_hot, targets, vocab


def softmax_bits(logits: np.ndarray, targets: np.ndarray) -> float:
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return float(-log_probs[np.arange(len(targets)), targets].mean() / np.log(2.0))


def main() -> None:
    if learning_rate <= 0:
        raise SystemExit("learning_rate must be positive")
    if hidden_width < 1:
        raise SystemExit("hidden_width must be at least 1")
    if iterations < 0:
        raise SystemExit("iterations must not be negative")
    if context < 1:
        raise SystemExit("context must be at least 1")
    if batch_size < 1:
        raise SystemExit("batch_size must be at least 1")

    text = normalize(CORPUS)
    inputs, targets, vocab = build_dataset(text, context)
    split = int(len(targets) * 0.9)
    train_x, train_y = inputs[:split], targets[:split]
    val_x, val_y = inputs[split:], targets[split:]

    rng = np.random.default_rng(seed)
    w1 = rng.normal(0.0, 0.1, (inputs.shape[1], hidden_width))
    b1 = np.zeros(hidden_width)
    # zero output weights make the untrained model exactly uniform
    w2 = np.zeros((hidden_width, vocab))
    b2 = np.zeros(vocab)

    for _ in range(iterations):
        batch = rng.integers(0, len(train_y), batch_size)
        x, y = train_x[batch], train_y[batch]
        hidden = np.tanh(x @ w1 + b1)
        logits = hidden @ w2 + b2
        shifted = logits - logits.max(axis=1, keepdims=True)
        probs = np.exp(shifted)
        probs /= probs.sum(axis=1, keepdims=True)
        grad_logits = probs
        grad_logits[np.arange(len(y)), y] -= 1.0
        grad_logits /= len(y)
        grad_w2 = hidden.T @ grad_logits
        grad_b2 = grad_logits.sum(axis=0)
        grad_hidden = (grad_logits @ w2.T) * (1.0 - hidden * hidden)
        grad_w1 = x.T @ grad_hidden
        grad_b1 = grad_hidden.sum(axis=0)
        w2 -= learning_rate * grad_w2
        b2 -= learning_rate * grad_b2
        w1 -= learning_rate * grad_w1
        b1 -= learning_rate * grad_b1

    val_logits = np.tanh(val_x @ w1 + b1) @ w2 + b2
    print(f"val_bpb: {softmax_bits(val_logits, val_y):.4f}")


if __name__ == "__main__":
    main()
