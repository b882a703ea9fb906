"""Shipped word -> part-of-speech lexicon for the default tagger.

Covers the aerial-scene vocabulary the pipeline emits; anything outside the
lexicon (and not resolvable by suffix heuristics) is dropped by extraction.
"""

NOUN = "N"
ADJ = "ADJ"

LEXICON: dict[str, str] = {
    # scene objects
    "building": NOUN, "road": NOUN, "tree": NOUN, "river": NOUN,
    "forest": NOUN, "runway": NOUN, "vessel": NOUN, "vehicle": NOUN,
    "farmland": NOUN, "field": NOUN, "tank": NOUN, "bridge": NOUN,
    "airport": NOUN, "harbor": NOUN, "beach": NOUN, "lake": NOUN,
    "playground": NOUN, "parking": NOUN, "lot": NOUN, "house": NOUN,
    "highway": NOUN, "intersection": NOUN, "pond": NOUN, "grass": NOUN,
    "meadow": NOUN, "hill": NOUN, "mountain": NOUN, "desert": NOUN,
    "island": NOUN, "port": NOUN, "dock": NOUN, "pier": NOUN,
    "ship": NOUN, "boat": NOUN, "plane": NOUN, "aircraft": NOUN,
    "stadium": NOUN, "court": NOUN, "pool": NOUN, "roof": NOUN,
    "zone": NOUN, "area": NOUN, "region": NOUN, "plot": NOUN,
    "crop": NOUN, "orchard": NOUN, "vineyard": NOUN, "pasture": NOUN,
    "warehouse": NOUN, "factory": NOUN, "plant": NOUN, "terminal": NOUN,
    "town": NOUN, "city": NOUN, "village": NOUN, "block": NOUN,
    "coast": NOUN, "shore": NOUN, "bank": NOUN, "canal": NOUN,
    "railway": NOUN, "track": NOUN, "path": NOUN, "trail": NOUN,
    "water": NOUN, "land": NOUN, "soil": NOUN, "sand": NOUN,
    "object": NOUN, "structure": NOUN, "image": NOUN, "scene": NOUN,
    "center": NOUN, "side": NOUN, "portion": NOUN, "part": NOUN,
    "top": NOUN, "bottom": NOUN, "left": NOUN, "right": NOUN,
    "middle": NOUN, "corner": NOUN, "edge": NOUN,
    # modifiers
    "dense": ADJ, "sparse": ADJ, "wide": ADJ, "narrow": ADJ,
    "large": ADJ, "small": ADJ, "green": ADJ, "blue": ADJ,
    "brown": ADJ, "gray": ADJ, "urban": ADJ, "rural": ADJ,
    "industrial": ADJ, "residential": ADJ, "agricultural": ADJ,
    "commercial": ADJ, "vertical": ADJ, "horizontal": ADJ,
    "rectangular": ADJ, "circular": ADJ, "open": ADJ, "empty": ADJ,
    "packed": ADJ, "scattered": ADJ, "long": ADJ, "short": ADJ,
    "central": ADJ, "main": ADJ, "bare": ADJ, "dry": ADJ,
    "paved": ADJ, "curved": ADJ, "straight": ADJ,
}
