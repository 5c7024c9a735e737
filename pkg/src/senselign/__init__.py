"""senselign: adapt a sense-decomposed causal LM across languages by
contrastive alignment of sense mixtures and contextual states, with the
accompanying geometry analyses, mixture ablations, corpus filtering, and
likelihood-based multiple-choice scoring."""

__version__ = "0.1.0"
