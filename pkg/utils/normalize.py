import re
import unicodedata

_AGE_ALIASES = {
    "child": "Child",
    "kid": "Child",
    "teen": "Teenager",
    "teenager": "Teenager",
    "adult": "Adult",
    "senior": "Senior",
    "elder": "Senior",
    "elderly": "Senior",
}


def normalize_token(s: str) -> str:
    """Normalize a free-text label for comparisons.

    Behaviors:
    - Trim and coerce to str
    - Unicode NFKC normalization
    - Remove diacritics
    - Lowercase
    - Collapse punctuation and whitespace
    """
    if s is None:
        return ""
    s = unicodedata.normalize("NFKC", str(s).strip())
    s = "".join(ch for ch in unicodedata.normalize("NFD", s) if unicodedata.category(ch) != "Mn")
    s = s.lower()
    s = re.sub(r"[^\w\s]", " ", s, flags=re.U)
    return re.sub(r"\s+", " ", s).strip()


def normalize_label(attribute: str, value: str) -> str:
    """Map a hand-entered label onto the canonical category spelling.

    gender: "a"/"B" -> "A"/"B"; age: "teen", "ADULT" -> "Teenager", "Adult";
    race: "2", "02" -> "2". Unrecognized values come back trimmed but otherwise
    untouched, so callers can reject them against the category list.
    """
    token = normalize_token(value)
    if attribute == "gender":
        return token.upper()
    if attribute == "age":
        return _AGE_ALIASES.get(token, str(value).strip())
    if attribute == "race":
        return str(int(token)) if token.isdigit() else str(value).strip()
    return str(value).strip()
