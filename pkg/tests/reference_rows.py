"""Per-class values and printed means of published benchmark rows ("/" cells are ``None``).

Each entry is ``(dataset, metric, printed_mean, per_class_values)``.
"""

_ = None

CLASSIFICATION_ROWS = [
    ("MIMIC", "auc", 74.7, [74.5, 74.5, 88.1, _, 62.3, 78.5, 74.4, 83.2, _, _, _, 61.9, _, _]),
    ("MIMIC", "f1", 38.3, [52.1, 49.3, 68.3, _, 30.9, 24.1, 22.5, 52.6, _, _, _, 6.7, _, _]),
    ("CheXpert", "auc", 71.7, [65.1, 79.6, 81.9, _, 64.7, 79.7, 60.6, 79.7, _, _, _, 62.5, _, _]),
    ("CheXpert", "f1", 43.8, [51.3, 47.2, 72.9, _, 27.2, 41.9, 35.7, 59.7, _, _, _, 14.3, _, _]),
    ("ChestXray14", "auc", 75.4, [75.1, 80.6, 86.0, 66.1, 68.1, 78.9, 77.2, 83.3, 76.1, 69.5, 68.4, _, _, _]),
    ("ChestXray14", "f1", 20.8, [30.5, 21.7, 48.6, 17.0, 5.4, 30.9, 20.1, 15.2, 16.6, 7.6, 14.7, _, _, _]),
    ("CXR-AL14", "auc", 80.5, [95.9, _, 93.7, 58.2, _, 93.4, 85.2, _, 93.1, 69.3, 78.8, 56.9, _, _]),
    ("CXR-AL14", "f1", 48.9, [47.8, _, 83.2, 35.5, _, 60.1, 66.9, _, 70.0, 30.4, 34.6, 12.0, _, _]),
    ("PadChest", "auc", 82.5, [71.7, 88.2, 93.5, 67.1, 79.9, 91.9, 85.4, 95.6, 81.6, 93.7, 76.9, 69.2, 93.0, 66.6]),
    ("PadChest", "f1", 26.4, [18.3, 50.8, 63.8, 12.3, 31.7, 17.6, 18.5, 22.3, 14.8, 34.9, 25.5, 11.0, 33.3, 15.1]),
    ("PD1", "auc", 79.9, [87.0, 91.4, 91.4, 64.2, 82.6, 87.4, 84.4, 97.4, 82.4, 55.4, 66.1, 66.5, 88.6, 74.1]),
    ("PD1", "f1", 48.1, [52.6, 72.7, 81.1, 37.8, 59.6, 53.8, 15.4, 64.5, 37.6, 30.6, 31.7, 32.1, 54.8, 48.8]),
    ("PD2", "auc", 83.3, [91.7, 90.7, 92.9, 66.9, 83.1, 90.8, 87.9, 97.3, 87.0, 69.4, 72.9, 75.6, 83.6, 76.5]),
    ("PD2", "f1", 40.4, [38.2, 67.3, 71.7, 39.7, 56.3, 44.4, 10.0, 48.2, 31.7, 29.0, 27.6, 25.1, 40.5, 35.4]),
    ("PD3", "auc", 81.5, [89.5, 88.0, 88.5, 64.5, 82.8, 80.3, 92.2, 96.4, 87.7, 72.9, 71.9, 69.2, 85.0, 72.1]),
    ("PD3", "f1", 33.1, [14.0, 68.5, 61.6, 23.7, 52.3, 16.2, 7.5, 37.2, 32.0, 23.5, 24.8, 24.8, 42.3, 34.3]),
    ("PD4", "auc", 90.2, [94.7, 95.1, 92.9, 62.1, 86.0, 98.4, 96.7, 99.2, 97.5, 86.6, 92.4, 90.2, 76.0, 95.5]),
    ("PD4", "f1", 27.7, [15.4, 64.7, 41.0, 20.3, 48.0, 13.3, 7.1, 66.7, 20.7, 17.2, 18.2, 16.7, 7.8, 30.8]),
    ("PD5", "auc", 86.6, [99.7, 92.2, 99.3, 55.2, 82.9, _, _, 70.1, 97.5, 86.1, 91.8, _, 85.2, 93.0]),
    ("PD5", "f1", 40.3, [66.7, 57.7, 66.7, 27.6, 48.8, _, _, 3.4, 44.4, 19.6, 28.6, _, 71.4, 8.7]),
]

LOCALIZATION_ROWS = [
    ("MS-CXR", "ap50", 19.9, [14.0, 66.6, 12.8, _, 14.8, 13.7, 10.0, 7.1, _, _, _, _, _, _, _]),
    ("VinDr-CXR", "ap50", 15.5, [9.0, 44.1, 13.5, 6.9, _, 10.4, 6.8, _, _, 7.4, 6.7, _, _, _, 34.5]),
    ("ChestXray14", "ap50", 15.9, [6.5, 60.3, 5.6, 8.2, 6.9, 7.8, _, _, _, _, _, _, _, _, _]),
    ("CXR-AL14", "ap50", 24.5, [22.3, _, 20.1, 10.6, _, 34.1, 24.1, _, 54.5, 16.3, 11.7, 26.6, _, _, _]),
    ("Chest-Det", "ap50", 19.8, [12.1, 56.2, 18.3, 6.0, _, 17.2, 26.4, _, 29.7, 14.9, 11.2, 5.7, _, _, _]),
    ("PD1", "ap50", 27.6, [29.7, 70.3, 32.5, 11.6, 17.7, 31.2, 5.0, 52.0, 10.6, 15.9, 6.7, 15.5, 40.1, 32.7, 43.1]),
    ("PD2", "ap50", 22.9, [16.0, 59.2, 20.9, 9.6, 11.0, 26.5, 6.8, 44.1, 15.8, 10.2, 5.7, 12.9, 42.4, 19.2, 43.1]),
    ("PD3", "ap50", 17.7, [5.0, 37.5, 23.7, 18.9, 12.0, 5.0, _, 7.6, 10.6, 8.5, 5.7, 5.8, 44.3, 8.6, 54.2]),
    # the Pneumothorax cell prints 105.0, outside the AP range; kept out of the checked rows
    ("PD5", "ap50", 11.7, [5.2, 26.3, 8.7, 8.9, 7.2, _, _, 5.0, 5.1, 4.9, 5.0, _, 24.8, 5.8, 33.1]),
]

# rows the acceptance gate names explicitly
ACCEPTANCE_ROWS = [
    ("MIMIC", "auc", 74.7), ("MIMIC", "f1", 38.3), ("CheXpert", "auc", 71.7),
    ("MS-CXR", "ap50", 19.9), ("ChestXray14", "ap50", 15.9),
]


def lookup(dataset, metric):
    for row in CLASSIFICATION_ROWS + LOCALIZATION_ROWS:
        if row[0] == dataset and row[1] == metric:
            return row
    raise KeyError((dataset, metric))
